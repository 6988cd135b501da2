//! Binary checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "VAXCKPT1"
//! version      u32      1
//! dtype        u32      4 (f32) or 8 (f64): width of every float below
//! depth        u32
//! width        u32
//! skip         u32      0 = no skip layer
//! color_width  u32
//! pos_levels   u32
//! dir_levels   u32
//! include_input u32     0 or 1
//! activation   u32      0 = softplus, 1 = relu
//! shift        f64      softplus shift (0 for relu)
//! networks     u32      1 (single) or 2 (coarse, fine)
//! per network: tensors u32, then per tensor: len u64, len floats
//!              order: trunk W0 b0 .. W(D-1) b(D-1), density W b,
//!              feature W b, color_hidden W b, rgb W b; W is input-major
//! optimizer    u8       0 = absent; 1 = per network: step u64, m tensors, v tensors
//! training     u8       0 = absent; 1 = iteration u64, coarse_capacity u64,
//!                       fine_capacity u64, recalibrated u8,
//!                       config_len u64, config as UTF-8 JSON
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nerf::{AdamState, DensityActivation, MlpConfig, MlpParams};
use crate::scalar::Scalar;

use super::{Model, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VAXCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a run stands: everything beyond the weights that resuming needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub iteration: u64,
    pub coarse_capacity: usize,
    pub fine_capacity: usize,
    pub recalibrated: bool,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<Vec<AdamState<T>>>,
    pub training: Option<TrainingState>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn weights_only(model: Model<T>) -> Self {
        Self { model, optimizer: None, training: None }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensors<T: Scalar>(out: &mut Vec<u8>, params: &MlpParams<T>) {
    let tensors = params.tensors();
    put_u32(out, tensors.len() as u32);
    for t in tensors {
        put_u64(out, t.len() as u64);
        for &v in t {
            v.write_le(out);
        }
    }
}

pub fn encode_checkpoint<T: Scalar>(ck: &Checkpoint<T>) -> Vec<u8> {
    let cfg = ck.model.coarse.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, T::DTYPE_TAG);
    for v in [cfg.depth, cfg.width, cfg.skip.unwrap_or(0), cfg.color_width, cfg.pos_levels, cfg.dir_levels] {
        put_u32(&mut out, v as u32);
    }
    put_u32(&mut out, cfg.include_input as u32);
    let (kind, shift) = match cfg.density_activation {
        DensityActivation::Softplus { shift } => (0, shift),
        DensityActivation::Relu => (1, 0.0),
    };
    put_u32(&mut out, kind);
    out.extend_from_slice(&shift.to_le_bytes());
    let nets = ck.model.networks();
    put_u32(&mut out, nets.len() as u32);
    for n in &nets {
        put_tensors(&mut out, n);
    }
    match &ck.optimizer {
        None => out.push(0),
        Some(states) => {
            out.push(1);
            for st in states {
                put_u64(&mut out, st.step);
                put_tensors(&mut out, &st.m);
                put_tensors(&mut out, &st.v);
            }
        }
    }
    match &ck.training {
        None => out.push(0),
        Some(tr) => {
            out.push(1);
            put_u64(&mut out, tr.iteration);
            put_u64(&mut out, tr.coarse_capacity as u64);
            put_u64(&mut out, tr.fine_capacity as u64);
            out.push(tr.recalibrated as u8);
            let json = serde_json::to_vec(&tr.config).expect("config serializes");
            put_u64(&mut out, json.len() as u64);
            out.extend_from_slice(&json);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::format(self.path, format!("{what} flag is {v}, expected 0 or 1"))),
        }
    }

    fn tensors<T: Scalar>(&mut self, config: MlpConfig) -> Result<MlpParams<T>> {
        let mut params = MlpParams::<T>::zeros(config);
        let count = self.u32()? as usize;
        let mut tensors = params.tensors_mut();
        if count != tensors.len() {
            return Err(Error::format(self.path, format!("{count} tensors, architecture has {}", tensors.len())));
        }
        let width = T::DTYPE_TAG as usize;
        for (i, t) in tensors.iter_mut().enumerate() {
            let len = self.u64()? as usize;
            if len != t.len() {
                return Err(Error::format(self.path, format!("tensor {i} has {len} values, expected {}", t.len())));
            }
            let raw = self.take(len.checked_mul(width).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
            for (v, chunk) in t.iter_mut().zip(raw.chunks_exact(width)) {
                *v = T::read_le(chunk);
            }
        }
        Ok(params)
    }
}

/// Width tag of a checkpoint's floats (4 or 8), read from its header.
pub fn peek_dtype(path: &Path) -> Result<u32> {
    let bytes = read_file(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    header(&mut r)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path, "checkpoint file does not exist")
        } else {
            Error::io(path, e)
        }
    })
}

fn header(r: &mut Reader) -> Result<u32> {
    if r.take(8).map_err(|_| Error::format(r.path, "not a checkpoint"))? != CHECKPOINT_MAGIC {
        return Err(Error::format(r.path, "bad magic; not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(r.path, format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")));
    }
    r.u32()
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    let dtype = header(&mut r)?;
    if dtype != T::DTYPE_TAG {
        return Err(Error::format(path, format!("stored floats are {dtype} bytes wide, reader expects {}", T::DTYPE_TAG)));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let include_input = r.u32()? != 0;
    let density_activation = match (r.u32()?, r.f64()?) {
        (0, shift) => DensityActivation::Softplus { shift },
        (1, _) => DensityActivation::Relu,
        (k, _) => return Err(Error::format(path, format!("unknown density activation {k}"))),
    };
    let config = MlpConfig {
        depth: dims[0],
        width: dims[1],
        skip: (dims[2] != 0).then_some(dims[2]),
        color_width: dims[3],
        pos_levels: dims[4],
        dir_levels: dims[5],
        include_input,
        density_activation,
    };
    config.validate().map_err(|e| Error::format(path, format!("stored architecture is invalid: {e}")))?;
    let nets = r.u32()?;
    if !(1..=2).contains(&nets) {
        return Err(Error::format(path, format!("{nets} networks; expected 1 or 2")));
    }
    let coarse = r.tensors(config)?;
    let fine = if nets == 2 { Some(r.tensors(config)?) } else { None };
    let model = Model { coarse, fine };
    let optimizer = if r.flag("optimizer")? {
        let mut states = Vec::new();
        for _ in 0..nets {
            let step = r.u64()?;
            let m = r.tensors(config)?;
            let v = r.tensors(config)?;
            states.push(AdamState { m, v, step });
        }
        Some(states)
    } else {
        None
    };
    let training = if r.flag("training")? {
        let iteration = r.u64()?;
        let coarse_capacity = r.u64()? as usize;
        let fine_capacity = r.u64()? as usize;
        let recalibrated = r.flag("recalibrated")?;
        let len = r.u64()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::format(path, format!("stored training config: {e}")))?;
        Some(TrainingState { iteration, coarse_capacity, fine_capacity, recalibrated, config })
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, optimizer, training })
}

pub fn save_checkpoint<T: Scalar>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&read_file(path)?, path)
}
