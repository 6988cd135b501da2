//! Training loop for the baseline and hull-accelerated modes.
//!
//! * `baseline`: coarse and fine networks, every sample evaluated.
//! * `vax_single`: one network, samples outside the hull are skipped.
//! * `vax_hier`: coarse and fine networks, the hull applied to both sample sets.
//!
//! A step is a pure function of the parameters, the optimizer state and the
//! iteration number: pixels and per-ray streams are derived from
//! `(seed, iteration)`, rays are split into fixed-size shards and their
//! gradients summed by a fixed-order tree.

mod checkpoint;
mod pipeline;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, peek_dtype, save_checkpoint, Checkpoint, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pipeline::Model;
pub(crate) use pipeline::{run_pass, PassError, PassSpec};

use crate::error::{Error, Result};
use crate::hull::{load_grid, VoxelGrid};
use crate::nerf::{adam_step, AdamState, MlpConfig};
use crate::sampling::{
    calibrate_capacity, dataset_rays, inflate, sample_coarse, sample_pixels, CapacityProbe, FineDraw, Ray,
    DEFAULT_CAPACITY_SAFETY,
};
use crate::scalar::Scalar;
use crate::scene::Dataset;
use pipeline::{tree_reduce, PassOut, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    VaxSingle,
    VaxHier,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::VaxSingle => "vax_single",
            TrainMode::VaxHier => "vax_hier",
        }
    }

    pub fn uses_hull(self) -> bool {
        self != TrainMode::Baseline
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "vax_single" => Ok(TrainMode::VaxSingle),
            "vax_hier" => Ok(TrainMode::VaxHier),
            other => Err(Error::Config(format!("unknown mode {other:?}; expected baseline, vax_single or vax_hier"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub n_coarse: usize,
    /// Zero trains a single network.
    pub n_fine: usize,
    pub batch_rays: usize,
    pub iterations: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub grid_path: Option<PathBuf>,
    pub capacity_safety: f64,
    /// Random batches used to size the packed capacity.
    pub capacity_probe_iters: usize,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Validation PSNR cadence in iterations; zero disables it.
    pub val_every: u64,
    pub val_views: usize,
    pub val_downscale: u32,
    /// Rays per gradient shard; fixes the reduction tree.
    pub shard_rays: usize,
    pub stratified: bool,
    /// Standard deviation of noise added to raw density during training.
    pub sigma_noise: f64,
    pub network: MlpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Baseline,
            n_coarse: 64,
            n_fine: 128,
            batch_rays: 4096,
            iterations: 1_000_000,
            lr_init: 5e-4,
            lr_final: 5e-6,
            grid_path: None,
            capacity_safety: DEFAULT_CAPACITY_SAFETY,
            capacity_probe_iters: 8,
            seed: 0,
            log_every: 100,
            checkpoint_every: 10_000,
            val_every: 1000,
            val_views: 2,
            val_downscale: 4,
            shard_rays: 256,
            stratified: true,
            sigma_noise: 0.0,
            network: MlpConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self.mode {
            TrainMode::VaxSingle if self.n_fine != 0 => return bad("vax_single trains one network; set n_fine = 0".into()),
            TrainMode::VaxHier if self.n_fine == 0 => return bad("vax_hier needs n_fine > 0".into()),
            _ => {}
        }
        if self.n_coarse == 0 || self.batch_rays == 0 || self.shard_rays == 0 {
            return bad("n_coarse, batch_rays and shard_rays must be positive".into());
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return bad(format!("learning rates must be positive, got {} -> {}", self.lr_init, self.lr_final));
        }
        if !(self.capacity_safety >= 1.0) {
            return bad(format!("capacity_safety {} must be at least 1", self.capacity_safety));
        }
        if !(self.sigma_noise >= 0.0) {
            return bad(format!("sigma_noise {} must be non-negative", self.sigma_noise));
        }
        if self.val_downscale == 0 {
            return bad("val_downscale must be positive".into());
        }
        self.network.validate()
    }

    pub fn hierarchical(&self) -> bool {
        self.n_fine > 0
    }

    /// Samples per ray the fine network sees before rejection.
    pub fn union_samples(&self) -> usize {
        self.n_coarse + self.n_fine
    }

    /// `vax_c64`, `vax_c32f64`, `c64f128`: the labels used in reports.
    pub fn label(&self) -> String {
        let prefix = if self.mode.uses_hull() { "vax_" } else { "" };
        if self.hierarchical() {
            format!("{prefix}c{}f{}", self.n_coarse, self.n_fine)
        } else {
            format!("{prefix}c{}", self.n_coarse)
        }
    }
}

/// Exponential decay from `lr_init` at iteration 0 to `lr_final` at `iterations`.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    if config.iterations == 0 {
        return config.lr_init;
    }
    let progress = iteration as f64 / config.iterations as f64;
    config.lr_init * (config.lr_final / config.lr_init).powf(progress)
}

/// Seed of the batch drawn at `iteration`.
pub fn batch_seed(seed: u64, iteration: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(iteration))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Iteration index the step consumed (0-based).
    pub iteration: u64,
    pub loss: f64,
    /// Network evaluations: kept coarse samples plus kept fine-union samples.
    pub points: usize,
    /// The fine-union part of `points`.
    pub fine_points: usize,
    pub seconds: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Completed iterations.
    pub iter: u64,
    pub wall_s: f64,
    pub loss: f64,
    pub points: usize,
    pub fine_points: usize,
    /// Network evaluations since iteration 0.
    pub total_points: u64,
    pub rays_per_s: f64,
    pub val_psnr: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const TRAIN_LOG_HEADER: [&str; 6] = ["iter", "wall_s", "loss", "points", "rays_per_s", "val_psnr"];

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Validation(format!("writing log: {e}"));
        w.write_record(TRAIN_LOG_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(row_fields(r)).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("train log", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// CSV fields of one row; losses keep full precision so runs can be diffed.
pub fn row_fields(r: &LogRow) -> [String; 6] {
    [
        r.iter.to_string(),
        format!("{:.3}", r.wall_s),
        format!("{:e}", r.loss),
        r.points.to_string(),
        format!("{:.1}", r.rays_per_s),
        r.val_psnr.map(|p| format!("{p:.4}")).unwrap_or_default(),
    ]
}

/// Held-out views used for periodic PSNR.
#[derive(Debug, Clone)]
pub struct Validation {
    pub dataset: Dataset,
}

impl Validation {
    /// First `views` views of `dataset`, downscaled by `factor`.
    pub fn from_dataset(dataset: &Dataset, views: usize, factor: u32) -> Result<Self> {
        let mut picked = dataset.take_views(views.min(dataset.views.len()));
        if factor > 1 {
            for v in &mut picked.views {
                v.image = v.image.downsampled(factor as usize)?;
                v.pose = v.pose.downscaled(factor)?;
            }
        }
        Ok(Self { dataset: picked })
    }
}

pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    model: Model<T>,
    adam: Vec<AdamState<T>>,
    iteration: u64,
    grid: Option<VoxelGrid>,
    coarse_capacity: usize,
    fine_capacity: usize,
    recalibrated: bool,
    background: [f64; 3],
}

impl<T: Scalar> Trainer<T> {
    /// Fresh networks seeded from `config.seed`; vax modes need `grid`.
    pub fn new(config: TrainConfig, dataset: &Dataset, grid: Option<VoxelGrid>) -> Result<Self> {
        config.validate()?;
        let model = Model::init(config.network, config.hierarchical(), config.seed)?;
        let adam = model.adam_states();
        let grid = Self::check_grid(&config, grid)?;
        let mut trainer = Self {
            config,
            model,
            adam,
            iteration: 0,
            grid,
            coarse_capacity: 0,
            fine_capacity: 0,
            recalibrated: false,
            background: dataset.background,
        };
        trainer.calibrate(dataset, 1, 0);
        Ok(trainer)
    }

    /// Continues from a saved state; the grid is reloaded by the caller.
    pub fn from_checkpoint(checkpoint: Checkpoint<T>, dataset: &Dataset, grid: Option<VoxelGrid>) -> Result<Self> {
        let path = PathBuf::from("checkpoint");
        let state = checkpoint.training.ok_or_else(|| Error::format(&path, "no training state to resume from"))?;
        let adam = checkpoint.optimizer.ok_or_else(|| Error::format(&path, "no optimizer state to resume from"))?;
        state.config.validate()?;
        if adam.len() != checkpoint.model.networks().len() || state.config.hierarchical() != checkpoint.model.fine.is_some() {
            return Err(Error::format(&path, "network count disagrees with the stored config"));
        }
        let grid = Self::check_grid(&state.config, grid)?;
        Ok(Self {
            config: state.config,
            model: checkpoint.model,
            adam,
            iteration: state.iteration,
            grid,
            coarse_capacity: state.coarse_capacity,
            fine_capacity: state.fine_capacity,
            recalibrated: state.recalibrated,
            background: dataset.background,
        })
    }

    fn check_grid(config: &TrainConfig, grid: Option<VoxelGrid>) -> Result<Option<VoxelGrid>> {
        match (config.mode.uses_hull(), grid) {
            (true, None) => Err(Error::Config(format!("mode {} needs an occupancy grid", config.mode))),
            (true, g) => Ok(g),
            (false, _) => Ok(None),
        }
    }

    /// Packed capacities: exact sample counts without a hull, otherwise the
    /// probed maximum inflated by the safety factor.
    fn calibrate(&mut self, dataset: &Dataset, probe_scale: usize, at_least: usize) {
        let cfg = &self.config;
        let (coarse, fine) = match &self.grid {
            None => (cfg.n_coarse, cfg.union_samples()),
            Some(grid) => {
                let probe = CapacityProbe {
                    n_samples: cfg.n_coarse,
                    batch_rays: cfg.batch_rays,
                    safety: 1.0,
                    seed: cfg.seed ^ self.iteration,
                };
                let observed = calibrate_capacity(dataset, grid, &probe, cfg.capacity_probe_iters * probe_scale);
                let observed = observed.max(at_least);
                let coarse = inflate(observed, cfg.capacity_safety).min(cfg.n_coarse);
                let fine = if cfg.mode == TrainMode::VaxHier {
                    inflate(observed + cfg.n_fine, cfg.capacity_safety).min(cfg.union_samples())
                } else {
                    cfg.union_samples()
                };
                (coarse, fine)
            }
        };
        self.coarse_capacity = self.coarse_capacity.max(coarse);
        self.fine_capacity = self.fine_capacity.max(fine);
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn grid(&self) -> Option<&VoxelGrid> {
        self.grid.as_ref()
    }

    /// (coarse, fine) packed capacities in samples per ray.
    pub fn capacities(&self) -> (usize, usize) {
        (self.coarse_capacity, self.fine_capacity)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.adam.clone()),
            training: Some(TrainingState {
                iteration: self.iteration,
                coarse_capacity: self.coarse_capacity,
                fine_capacity: self.fine_capacity,
                recalibrated: self.recalibrated,
                config: self.config.clone(),
            }),
        }
    }

    pub(crate) fn pass_spec(&self, batch_seed: u64) -> PassSpec<'_> {
        PassSpec {
            grid: self.grid.as_ref(),
            n_coarse: self.config.n_coarse,
            n_fine: self.config.n_fine,
            hull_on_fine: self.config.mode == TrainMode::VaxHier,
            stratified: self.config.stratified,
            fine_draw: FineDraw::Random,
            batch_seed,
            background: self.background,
            coarse_capacity: self.coarse_capacity,
            fine_capacity: self.fine_capacity,
            sigma_noise: self.config.sigma_noise,
        }
    }

    fn gradients(&self, rays: &[Ray], targets: &[[f64; 3]], seed: u64) -> std::result::Result<PassOut<T>, PassError> {
        let spec = self.pass_spec(seed);
        let shard = self.config.shard_rays;
        let batch_rays = rays.len();
        let outs: Vec<_> = rays
            .par_chunks(shard)
            .zip(targets.par_chunks(shard))
            .enumerate()
            .map(|(k, (r, t))| {
                run_pass(&self.model, r, k * shard, Some(Targets { colors: t, batch_rays }), true, &spec)
            })
            .collect();
        let outs = outs.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
        let merged = tree_reduce(outs, |mut a, b| {
            a.loss += b.loss;
            a.coarse_points += b.coarse_points;
            a.fine_points += b.fine_points;
            if let (Some(ga), Some(gb)) = (a.grads.as_mut(), b.grads.as_ref()) {
                ga.add_assign(gb);
            }
            a
        });
        Ok(merged.expect("batch has at least one ray"))
    }

    /// One optimizer step on the batch for the current iteration.
    pub fn step(&mut self, dataset: &Dataset) -> Result<StepStats> {
        let start = Instant::now();
        let it = self.iteration;
        let seed = batch_seed(self.config.seed, it);
        let pixels = sample_pixels(dataset, self.config.batch_rays, &mut ChaCha8Rng::seed_from_u64(seed));
        let rays = dataset_rays(dataset, &pixels);
        let targets: Vec<[f64; 3]> = pixels.iter().map(|&(v, r, c)| dataset.views[v].image.get(r as usize, c as usize)).collect();

        let out = loop {
            match self.gradients(&rays, &targets, seed) {
                Ok(out) => break out,
                Err(PassError::Capacity { fine, observed }) if !self.recalibrated => {
                    log::warn!(
                        "iteration {it}: a ray kept {observed} {} samples, over capacity {:?}; recalibrating",
                        if fine { "fine" } else { "coarse" },
                        self.capacities()
                    );
                    self.recalibrated = true;
                    let coarse_floor = if fine { 0 } else { observed };
                    self.calibrate(dataset, 4, coarse_floor);
                    if fine {
                        let c = &self.config;
                        self.fine_capacity = self.fine_capacity.max(inflate(observed, c.capacity_safety).min(c.union_samples()));
                    }
                }
                Err(PassError::Capacity { observed, .. }) => {
                    return Err(Error::Capacity { capacity: self.coarse_capacity.max(self.fine_capacity), observed });
                }
                Err(PassError::Other(e)) => return Err(e),
            }
        };
        let grads = out.grads.expect("gradients requested");
        if !out.loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it, batch_seed: seed });
        }
        let lr = lr_at(it, &self.config);
        let nets = self.model.networks_mut().into_iter().zip(grads.networks()).zip(&mut self.adam);
        for ((params, g), state) in nets {
            adam_step(params, g, state, lr);
        }
        self.iteration += 1;
        Ok(StepStats {
            iteration: it,
            loss: out.loss,
            points: out.coarse_points + out.fine_points,
            fine_points: out.fine_points,
            seconds: start.elapsed().as_secs_f64(),
            lr,
        })
    }

    /// Mean PSNR over the validation views.
    pub fn validate(&self, val: &Validation) -> Result<f64> {
        let settings = crate::eval::RenderSettings::for_training(&self.config, &val.dataset);
        let mut total = 0.0;
        for v in &val.dataset.views {
            let img = crate::eval::render_image(&self.model, &v.pose, &settings, self.grid.as_ref())?;
            total += crate::eval::psnr(&img, &v.image)?;
        }
        Ok(total / val.dataset.views.len().max(1) as f64)
    }

    /// Steps until `config.iterations`, logging, validating and checkpointing
    /// on the configured cadence. Rows are passed to `on_row` as they are made.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        val: Option<&Validation>,
        checkpoint_dir: Option<&Path>,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<TrainLog> {
        let cfg = self.config.clone();
        let start = Instant::now();
        let mut log = TrainLog::default();
        let mut total_points = 0u64;
        while self.iteration < cfg.iterations {
            let stats = self.step(dataset)?;
            total_points += stats.points as u64;
            let done = self.iteration;
            let last = done == cfg.iterations;
            let validate_now = val.is_some() && cfg.val_every > 0 && (done % cfg.val_every == 0 || last);
            if last || validate_now || (cfg.log_every > 0 && done % cfg.log_every == 0) {
                let val_psnr = match val {
                    Some(v) if validate_now => Some(self.validate(v)?),
                    _ => None,
                };
                let row = LogRow {
                    iter: done,
                    wall_s: start.elapsed().as_secs_f64(),
                    loss: stats.loss,
                    points: stats.points,
                    fine_points: stats.fine_points,
                    total_points,
                    rays_per_s: cfg.batch_rays as f64 / stats.seconds.max(1e-12),
                    val_psnr,
                };
                on_row(&row);
                log.rows.push(row);
            }
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                    save_checkpoint(&self.checkpoint(), &dir.join(format!("checkpoint_{done:08}.ckpt")))?;
                }
            }
        }
        Ok(log)
    }
}

/// Trains from scratch, loading the grid from `config.grid_path` in vax modes.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    val: Option<&Validation>,
    config: TrainConfig,
) -> Result<(Model<T>, TrainLog)> {
    if dataset.views.is_empty() {
        return Err(Error::Validation("training dataset has no views".into()));
    }
    let grid = match (&config.grid_path, config.mode.uses_hull()) {
        (Some(path), true) => Some(load_grid(path)?),
        (None, true) => return Err(Error::Config(format!("mode {} needs grid_path", config.mode))),
        _ => None,
    };
    let mut trainer = Trainer::<T>::new(config, dataset, grid)?;
    let log = trainer.run(dataset, val, None, |_| {})?;
    Ok((trainer.into_model(), log))
}

/// Sampling settings for [`loss_and_grad`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub stratified: bool,
    /// Keys the per-ray random streams.
    pub seed: u64,
    pub background: [f64; 3],
}

/// Mean-reduced photometric loss of one batch (coarse plus fine terms) and
/// its exact gradient for every network parameter. Samples outside `grid`
/// are skipped in both passes.
pub fn loss_and_grad<T: Scalar>(
    model: &Model<T>,
    rays: &[Ray],
    targets: &[[f64; 3]],
    grid: Option<&VoxelGrid>,
    batch: &BatchSpec,
) -> Result<(f64, Model<T>)> {
    if rays.len() != targets.len() || rays.is_empty() {
        return Err(Error::Validation(format!("{} rays but {} targets", rays.len(), targets.len())));
    }
    if model.fine.is_some() != (batch.n_fine > 0) {
        return Err(Error::Validation("fine samples requested without a fine network, or the reverse".into()));
    }
    let spec = PassSpec {
        grid,
        n_coarse: batch.n_coarse,
        n_fine: batch.n_fine,
        hull_on_fine: true,
        stratified: batch.stratified,
        fine_draw: FineDraw::Random,
        batch_seed: batch.seed,
        background: batch.background,
        coarse_capacity: batch.n_coarse,
        fine_capacity: batch.n_coarse + batch.n_fine,
        sigma_noise: 0.0,
    };
    let out = run_pass(model, rays, 0, Some(Targets { colors: targets, batch_rays: rays.len() }), true, &spec)
        .map_err(|e| match e {
            PassError::Other(e) => e,
            PassError::Capacity { observed, .. } => Error::Capacity { capacity: spec.fine_capacity, observed },
        })?;
    Ok((out.loss, out.grads.expect("gradients requested")))
}

/// Foreground training rays whose midpoint samples all fall outside the grid.
///
/// A conservative hull leaves none: every ray that sees the object keeps at
/// least one sample and so receives gradient.
pub fn uncovered_foreground_rays(dataset: &Dataset, grid: &VoxelGrid, n_samples: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    dataset
        .views
        .iter()
        .enumerate()
        .map(|(v, view)| {
            let pixels: Vec<(usize, u32, u32)> = (0..view.mask.height)
                .flat_map(|r| (0..view.mask.width).map(move |c| (r, c)))
                .filter(|&(r, c)| view.mask.get(r, c))
                .map(|(r, c)| (v, r as u32, c as u32))
                .collect();
            dataset_rays(dataset, &pixels)
                .iter()
                .filter(|ray| {
                    let s = sample_coarse(ray, n_samples, false, &mut rng);
                    s.t.iter().all(|&t| !grid.contains(&ray.at(t)))
                })
                .count()
        })
        .sum()
}
