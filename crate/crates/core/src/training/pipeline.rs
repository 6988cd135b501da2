//! One pass of rays through sampling, the network(s) and the compositor,
//! optionally with the exact backward pass. Shared by training and rendering.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::Vec3;
use crate::error::{Error, Result};
use crate::hull::VoxelGrid;
use crate::nerf::{encode_batch, render_backward, rgb_loss_grad, volume_render, MlpConfig, MlpParams};
use crate::nerf::{sigmoid, AdamState};
use crate::sampling::{pack_batch, ray_rng, reject_by_hull, sample_coarse, sample_fine, FineDraw, Ray, RaySamples};
use crate::scalar::{f, s, Scalar};

/// The coarse network and, for hierarchical sampling, the fine one.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub coarse: MlpParams<T>,
    pub fine: Option<MlpParams<T>>,
}

impl<T: Scalar> Model<T> {
    /// Both networks drawn from one stream seeded by `seed`, coarse first.
    pub fn init(config: MlpConfig, hierarchical: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse = MlpParams::init(config, &mut rng)?;
        let fine = if hierarchical { Some(MlpParams::init(config, &mut rng)?) } else { None };
        Ok(Self { coarse, fine })
    }

    pub fn zeros_like(&self) -> Self {
        Self { coarse: self.coarse.zeros_like(), fine: self.fine.as_ref().map(MlpParams::zeros_like) }
    }

    pub fn networks(&self) -> Vec<&MlpParams<T>> {
        std::iter::once(&self.coarse).chain(self.fine.as_ref()).collect()
    }

    pub fn networks_mut(&mut self) -> Vec<&mut MlpParams<T>> {
        std::iter::once(&mut self.coarse).chain(self.fine.as_mut()).collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.networks_mut().into_iter().zip(other.networks()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.networks().iter().all(|n| n.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|n| n.num_params()).sum()
    }

    pub fn adam_states(&self) -> Vec<AdamState<T>> {
        self.networks().into_iter().map(AdamState::new).collect()
    }
}

/// Sampling and compositing settings for one pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PassSpec<'a> {
    pub grid: Option<&'a VoxelGrid>,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Apply the hull to the fine (union) samples too.
    pub hull_on_fine: bool,
    pub stratified: bool,
    pub fine_draw: FineDraw,
    pub batch_seed: u64,
    pub background: [f64; 3],
    pub coarse_capacity: usize,
    pub fine_capacity: usize,
    pub sigma_noise: f64,
}

/// Loss targets for a shard and the full batch size used for the mean.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Targets<'a> {
    pub colors: &'a [[f64; 3]],
    pub batch_rays: usize,
}

#[derive(Debug)]
pub(crate) struct PassOut<T> {
    pub colors: Vec<[f64; 3]>,
    pub loss: f64,
    pub grads: Option<Model<T>>,
    pub coarse_points: usize,
    pub fine_points: usize,
}

#[derive(Debug)]
pub(crate) enum PassError {
    Capacity { fine: bool, observed: usize },
    Other(Error),
}

impl From<Error> for PassError {
    fn from(e: Error) -> Self {
        PassError::Other(e)
    }
}

struct StageOut {
    colors: Vec<[f64; 3]>,
    weights: Vec<Vec<f64>>,
    loss: f64,
    points: usize,
}

fn point<T: Scalar>(v: &Vec3) -> [T; 3] {
    [s(v.x), s(v.y), s(v.z)]
}

/// Evaluates one network on the kept samples of every ray and composites.
#[allow(clippy::too_many_arguments)]
fn stage<T: Scalar>(
    params: &MlpParams<T>,
    rays: &[Ray],
    samples: &[RaySamples],
    capacity: usize,
    background: [f64; 3],
    targets: Option<Targets>,
    grads: Option<&mut MlpParams<T>>,
    noise: Option<(f64, ChaCha8Rng)>,
) -> Result<StageOut> {
    let packed = pack_batch(rays, samples, capacity)?;
    let slots: Vec<(usize, usize, usize)> = packed.valid_slots().collect();
    let m = slots.len();
    let cfg = &params.config;
    let pts: Vec<[T; 3]> = slots.iter().map(|&(k, _, _)| point(&packed.positions[k])).collect();
    let dirs: Vec<[T; 3]> = slots.iter().map(|&(_, r, _)| point(&packed.directions[r])).collect();
    let x = encode_batch(&pts, cfg.pos_levels, cfg.include_input);
    let d = encode_batch(&dirs, cfg.dir_levels, cfg.include_input);
    let (mut raw_sigma, raw_rgb, cache) = params.forward_cached(x.view(), d.view())?;
    if let Some((std, mut rng)) = noise {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("sigma noise: {e}")))?;
        raw_sigma.mapv_inplace(|v| v + s(normal.sample(&mut rng)));
    }
    let act = cfg.density_activation;
    let sigma: Vec<T> = raw_sigma.iter().map(|&r| act.apply(r)).collect();
    let rgb: Vec<[T; 3]> = raw_rgb.rows().into_iter().map(|r| [sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2])]).collect();

    let want_grad = grads.is_some() && targets.is_some();
    let (mut d_sigma_raw, mut d_rgb_raw) =
        if want_grad { (Array1::zeros(m), Array2::zeros((m, 3))) } else { (Array1::zeros(0), Array2::zeros((0, 3))) };
    let mut colors = Vec::with_capacity(rays.len());
    let mut weights = Vec::with_capacity(rays.len());
    let mut loss = 0.0;
    let mut cursor = 0;
    for (r, smp) in samples.iter().enumerate() {
        let n = smp.len();
        let mut sig = vec![T::zero(); n];
        let mut col = vec![[T::zero(); 3]; n];
        let delta: Vec<T> = smp.delta.iter().map(|&d| s(d)).collect();
        let first = cursor;
        while cursor < m && slots[cursor].1 == r {
            let (_, _, i) = slots[cursor];
            sig[i] = sigma[cursor];
            col[i] = rgb[cursor];
            cursor += 1;
        }
        let out = volume_render(&sig, &col, &delta, &smp.keep)?;
        let rest = 1.0 - f(out.acc_alpha);
        let color: [f64; 3] = std::array::from_fn(|k| f(out.color[k]) + rest * background[k]);
        if let Some(tg) = targets {
            let target = tg.colors[r];
            loss += (0..3).map(|k| (color[k] - target[k]).powi(2)).sum::<f64>() / tg.batch_rays as f64;
            if want_grad {
                let dc = rgb_loss_grad(color, target, tg.batch_rays);
                let (ds, drgb) = render_backward(&sig, &col, &delta, &smp.keep, dc, background);
                for j in first..cursor {
                    let i = slots[j].2;
                    d_sigma_raw[j] = ds[i] * act.derivative(raw_sigma[j]);
                    for k in 0..3 {
                        let c = rgb[j][k];
                        d_rgb_raw[[j, k]] = drgb[i][k] * c * (T::one() - c);
                    }
                }
            }
        }
        colors.push(color);
        weights.push(out.weights.iter().map(|&w| f(w)).collect());
    }
    if want_grad {
        params.backward(&cache, d_sigma_raw.view(), d_rgb_raw.view(), grads.expect("checked"));
    }
    Ok(StageOut { colors, weights, loss, points: m })
}

fn masked(grid: Option<&VoxelGrid>, ray: &Ray, samples: RaySamples) -> RaySamples {
    match grid {
        Some(g) => reject_by_hull(g, ray, &samples),
        None => samples,
    }
}

fn noise_rng(spec: &PassSpec, first_index: usize, fine: bool) -> Option<(f64, ChaCha8Rng)> {
    (spec.sigma_noise > 0.0).then(|| {
        (spec.sigma_noise, ray_rng(spec.batch_seed ^ 0x6e6f_6973_655f_7369, 2 * first_index + fine as usize))
    })
}

/// Runs rays `first_index..first_index + rays.len()` of a batch.
///
/// Per-ray random streams are keyed by the global ray index, so the result
/// does not depend on how a batch is split into shards.
pub(crate) fn run_pass<T: Scalar>(
    model: &Model<T>,
    rays: &[Ray],
    first_index: usize,
    targets: Option<Targets>,
    want_grad: bool,
    spec: &PassSpec,
) -> std::result::Result<PassOut<T>, PassError> {
    let mut rngs: Vec<ChaCha8Rng> = (0..rays.len()).map(|i| ray_rng(spec.batch_seed, first_index + i)).collect();
    let coarse: Vec<RaySamples> = rays
        .iter()
        .zip(&mut rngs)
        .map(|(ray, rng)| masked(spec.grid, ray, sample_coarse(ray, spec.n_coarse, spec.stratified, rng)))
        .collect();
    let mut grads = want_grad.then(|| model.zeros_like());

    let overflow = |fine: bool| {
        move |e: Error| match e {
            Error::Capacity { observed, .. } => PassError::Capacity { fine, observed },
            other => PassError::Other(other),
        }
    };
    let c = stage(
        &model.coarse,
        rays,
        &coarse,
        spec.coarse_capacity,
        spec.background,
        targets,
        grads.as_mut().map(|g| &mut g.coarse),
        noise_rng(spec, first_index, false),
    )
    .map_err(overflow(false))?;

    let Some(fine_params) = &model.fine else {
        return Ok(PassOut { colors: c.colors, loss: c.loss, grads, coarse_points: c.points, fine_points: 0 });
    };
    let mut union = Vec::with_capacity(rays.len());
    for ((ray, smp), (w, rng)) in rays.iter().zip(&coarse).zip(c.weights.iter().zip(&mut rngs)) {
        let merged = sample_fine(ray, &smp.t, w, spec.n_fine, spec.fine_draw, rng)?;
        union.push(masked(spec.grid.filter(|_| spec.hull_on_fine), ray, merged));
    }
    let fine = stage(
        fine_params,
        rays,
        &union,
        spec.fine_capacity,
        spec.background,
        targets,
        grads.as_mut().and_then(|g| g.fine.as_mut()),
        noise_rng(spec, first_index, true),
    )
    .map_err(overflow(true))?;
    Ok(PassOut {
        colors: fine.colors,
        loss: c.loss + fine.loss,
        grads,
        coarse_points: c.points,
        fine_points: fine.points,
    })
}

/// Pairwise reduction in index order: `((0+1)+(2+3))+...`, independent of threading.
pub(crate) fn tree_reduce<X>(mut items: Vec<X>, combine: impl Fn(X, X) -> X) -> Option<X> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => combine(a, b),
                None => a,
            });
        }
        items = next;
    }
    items.pop()
}
