use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use vaxnerf::bench::{bench_sampling, save_bench_csv};
use vaxnerf::eval::{psnr, render_image, save_png, ssim, RenderSettings};
use vaxnerf::hull::{carve, dilate, dilation_radius, load_grid, save_grid, VoxelGrid};
use vaxnerf::scene::{load_dataset, save_dataset, Dataset, SceneSpec, Split, SyntheticScene};
use vaxnerf::training::{
    load_checkpoint, peek_dtype, row_fields, save_checkpoint, Checkpoint, TrainMode, Trainer, Validation,
    TRAIN_LOG_HEADER,
};
use vaxnerf::{Error, Scalar};

use crate::config::{Dilation, Precision, RunConfig};
use crate::{Cli, Command, EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE};

/// Refused operation caused by how the tool was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_USAGE,
                e if e.is_numeric() => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

/// Refuses to replace an existing file unless `force`.
fn claim_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
fn claim_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Resolved config for a single-file output, written as `<file>.config.toml`.
fn write_resolved_beside(cfg: &RunConfig, file: &Path) -> Result<()> {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    let path = file.with_file_name(name);
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.global.resolve()?;
    let force = cli.global.force;
    match cli.command {
        Command::Synth(a) => {
            a.apply(&mut cfg)?;
            setup_threads(&cfg)?;
            synth(&cfg, &a.out, force)
        }
        Command::Carve(a) => {
            a.apply(&mut cfg)?;
            setup_threads(&cfg)?;
            carve_cmd(&cfg, &a.data, &a.out, force)
        }
        Command::Train(a) => {
            a.apply(&mut cfg);
            cfg.train.validate()?;
            setup_threads(&cfg)?;
            match (&a.resume, cfg.precision) {
                (Some(ck), _) if peek_dtype(ck)? == 8 => train_cmd::<f64>(&cfg, &a, force),
                (Some(_), _) | (None, Precision::F32) => train_cmd::<f32>(&cfg, &a, force),
                (None, Precision::F64) => train_cmd::<f64>(&cfg, &a, force),
            }
        }
        Command::Render(a) => {
            a.apply(&mut cfg);
            setup_threads(&cfg)?;
            match peek_dtype(&a.checkpoint)? {
                8 => render_cmd::<f64>(&cfg, &a, force),
                _ => render_cmd::<f32>(&cfg, &a, force),
            }
        }
        Command::Eval(a) => {
            a.apply(&mut cfg);
            setup_threads(&cfg)?;
            match peek_dtype(&a.checkpoint)? {
                8 => eval_cmd::<f64>(&cfg, &a, force),
                _ => eval_cmd::<f32>(&cfg, &a, force),
            }
        }
        Command::Bench(a) => {
            a.apply(&mut cfg);
            setup_threads(&cfg)?;
            match cfg.precision {
                Precision::F32 => bench_cmd::<f32>(&cfg, &a, force),
                Precision::F64 => bench_cmd::<f64>(&cfg, &a, force),
            }
        }
    }
}

fn setup_threads(cfg: &RunConfig) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| anyhow!("configuring {} worker threads: {e}", cfg.threads))
}

fn scene_by_name(name: &str) -> Result<SceneSpec> {
    Ok(match name {
        "sphere" => SceneSpec::default_sphere(),
        "torus" => SceneSpec::default_torus(),
        "two_lobe" => SceneSpec::default_two_lobe(),
        "rod" => SceneSpec::Rod { a: [-0.6, 0.0, 0.0], b: [0.6, 0.0, 0.0], radius: 0.02, albedo: [0.9, 0.9, 0.2] },
        other => return Err(usage(format!("unknown scene {other:?}; expected sphere, torus, two_lobe or rod"))),
    })
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Built-in scene: sphere, torus, two_lobe or rod.
    #[arg(long)]
    pub scene: Option<String>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub val_views: Option<usize>,
    #[arg(long)]
    pub test_views: Option<usize>,
    /// Image width and height in pixels.
    #[arg(long)]
    pub resolution: Option<u32>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let s = &mut cfg.synth;
        if let Some(name) = &self.scene {
            s.scene = scene_by_name(name)?;
        }
        s.train_views = self.views.unwrap_or(s.train_views);
        s.val_views = self.val_views.unwrap_or(s.val_views);
        s.test_views = self.test_views.unwrap_or(s.test_views);
        s.resolution = self.resolution.unwrap_or(s.resolution);
        Ok(())
    }
}

fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    claim_dir(out, force)?;
    let s = &cfg.synth;
    let scene = SyntheticScene::new(s.scene.clone(), s.rig)?;
    let seed = cfg.seed.unwrap_or(0);
    for (k, (split, n)) in [(Split::Train, s.train_views), (Split::Val, s.val_views), (Split::Test, s.test_views)]
        .into_iter()
        .enumerate()
    {
        if n == 0 {
            continue;
        }
        let ds = scene.render_views(n, s.resolution, seed.wrapping_add(k as u64 * 0x9e37_79b9))?;
        save_dataset(out, split, &ds)?;
        println!("{}: {n} views at {}x{}", split.name(), s.resolution, s.resolution);
    }
    cfg.write_resolved(out)
}

#[derive(Debug, Args)]
pub struct CarveArgs {
    /// Dataset directory; the training split is carved.
    #[arg(long)]
    pub data: PathBuf,
    /// Cells per axis.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Dilation radius in cells, or "auto" for ceil(resolution / samples per ray).
    #[arg(long)]
    pub dilation: Option<String>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    /// Output grid file.
    #[arg(long)]
    pub out: PathBuf,
}

impl CarveArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let c = &mut cfg.carve;
        c.resolution = self.resolution.unwrap_or(c.resolution);
        c.samples_per_ray = self.samples_per_ray.unwrap_or(c.samples_per_ray);
        if let Some(d) = &self.dilation {
            c.dilation = match d.parse::<usize>() {
                Ok(n) => Dilation::Cells(n),
                Err(_) => Dilation::Rule(d.clone()),
            };
        }
        Ok(())
    }
}

fn dilation_cells(cfg: &RunConfig) -> Result<usize> {
    match &cfg.carve.dilation {
        Dilation::Cells(n) => Ok(*n),
        Dilation::Rule(r) if r == "auto" => Ok(dilation_radius(cfg.carve.resolution, cfg.carve.samples_per_ray)),
        Dilation::Rule(r) => Err(Error::Config(format!("dilation must be a cell count or \"auto\", got {r:?}")).into()),
    }
}

fn carve_cmd(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> Result<()> {
    let radius = dilation_cells(cfg)?;
    claim_file(out, force)?;
    let ds = load_dataset(data, Split::Train)?;
    let res = cfg.carve.resolution;
    let grid = dilate(&carve(&ds, [res; 3])?, radius);
    save_grid(&grid, out)?;
    write_resolved_beside(cfg, out)?;
    println!("occupancy fraction: {}", grid.occupancy_fraction());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, the log and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// baseline, vax_single or vax_hier.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub n_coarse: Option<usize>,
    #[arg(long)]
    pub n_fine: Option<usize>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub lr_final: Option<f64>,
    /// Occupancy grid for the vax modes.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; its stored config replaces [train].
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(m) = self.mode {
            t.mode = m;
        }
        t.iterations = self.iterations.unwrap_or(t.iterations);
        t.n_coarse = self.n_coarse.unwrap_or(t.n_coarse);
        t.n_fine = self.n_fine.unwrap_or(t.n_fine);
        t.batch_rays = self.batch_rays.unwrap_or(t.batch_rays);
        t.lr_init = self.lr_init.unwrap_or(t.lr_init);
        t.lr_final = self.lr_final.unwrap_or(t.lr_final);
        t.log_every = self.log_every.unwrap_or(t.log_every);
        t.checkpoint_every = self.checkpoint_every.unwrap_or(t.checkpoint_every);
        if let Some(g) = &self.grid {
            t.grid_path = Some(g.clone());
        }
    }
}

fn grid_for(mode: TrainMode, path: Option<&Path>) -> Result<Option<VoxelGrid>> {
    match (mode.uses_hull(), path) {
        (true, Some(p)) => Ok(Some(load_grid(p)?)),
        (true, None) => Err(Error::Config(format!("mode {mode} needs a grid (--grid or train.grid_path)")).into()),
        (false, _) => Ok(None),
    }
}

fn split_exists(root: &Path, split: Split) -> bool {
    split.manifest_path(root).exists()
}

fn train_cmd<T: Scalar>(cfg: &RunConfig, a: &TrainArgs, force: bool) -> Result<()> {
    claim_dir(&a.out, force)?;
    let ds = load_dataset(&a.data, Split::Train)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ck = load_checkpoint::<T>(path)?;
            let state = ck.training.as_mut().ok_or_else(|| usage(format!("{} holds no training state", path.display())))?;
            if let Some(n) = a.iterations {
                state.config.iterations = n;
            }
            let grid = grid_for(state.config.mode, state.config.grid_path.as_deref())?;
            Trainer::from_checkpoint(ck, &ds, grid)?
        }
        None => {
            let grid = grid_for(cfg.train.mode, cfg.train.grid_path.as_deref())?;
            Trainer::<T>::new(cfg.train.clone(), &ds, grid)?
        }
    };
    let mut resolved = cfg.clone();
    resolved.train = trainer.config().clone();
    resolved.write_resolved(&a.out)?;

    let tc = trainer.config().clone();
    let val = if tc.val_every > 0 && split_exists(&a.data, Split::Val) {
        let v = load_dataset(&a.data, Split::Val)?;
        Some(Validation::from_dataset(&v, tc.val_views, tc.val_downscale)?)
    } else {
        None
    };
    let log_path = a.out.join("train_log.csv");
    let mut log = csv_writer(&log_path)?;
    log.write_record(TRAIN_LOG_HEADER)?;
    log.flush()?;
    let mut write_err = None;
    let result = trainer.run(&ds, val.as_ref(), Some(&a.out), |row| {
        let res = log.write_record(row_fields(row)).and_then(|_| log.flush().map_err(Into::into));
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
        log::info!("iter {} loss {:.6} points {}", row.iter, row.loss, row.points);
    });
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    match result {
        Ok(_) => {
            let path = a.out.join("final.ckpt");
            save_checkpoint(&trainer.checkpoint(), &path)?;
            println!("trained {} iterations; wrote {}", trainer.iteration(), path.display());
            Ok(())
        }
        Err(e) => {
            if e.is_numeric() {
                let dump = a.out.join("crash_dump.ckpt");
                save_checkpoint(&trainer.checkpoint(), &dump)?;
                eprintln!("state before the failing step saved to {}", dump.display());
            }
            Err(e.into())
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(file))
}

/// Model, render settings and grid for a trained checkpoint.
fn load_trained<T: Scalar>(
    checkpoint: &Path,
    grid_override: Option<&Path>,
    data: &Dataset,
    chunk_rays: usize,
) -> Result<(Checkpoint<T>, RenderSettings, Option<VoxelGrid>)> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let state = ck
        .training
        .as_ref()
        .ok_or_else(|| usage(format!("{} holds no training config to render with", checkpoint.display())))?;
    let mut settings = RenderSettings::for_training(&state.config, data);
    settings.chunk_rays = chunk_rays;
    let grid = grid_for(state.config.mode, grid_override.or(state.config.grid_path.as_deref()))?;
    Ok((ck, settings, grid))
}

fn load_split(data: &Path, split: &str, downscale: u32) -> Result<Dataset> {
    let split: Split = split.parse().map_err(|e: Error| usage(e.to_string()))?;
    let mut ds = load_dataset(data, split)?;
    if downscale > 1 {
        for v in &mut ds.views {
            v.image = v.image.downsampled(downscale as usize)?;
            v.pose = v.pose.downscaled(downscale)?;
        }
    }
    Ok(ds)
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose split supplies the poses.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    /// Grid to use instead of the one named in the checkpoint.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub downscale: Option<u32>,
    #[arg(long)]
    pub chunk_rays: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

impl RenderArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let r = &mut cfg.render;
        if let Some(s) = &self.split {
            r.split = s.clone();
        }
        r.downscale = self.downscale.unwrap_or(r.downscale);
        r.chunk_rays = self.chunk_rays.unwrap_or(r.chunk_rays);
    }
}

fn render_cmd<T: Scalar>(cfg: &RunConfig, a: &RenderArgs, force: bool) -> Result<()> {
    claim_dir(&a.out, force)?;
    let ds = load_split(&a.data, &cfg.render.split, cfg.render.downscale)?;
    let (ck, settings, grid) = load_trained::<T>(&a.checkpoint, a.grid.as_deref(), &ds, cfg.render.chunk_rays)?;
    for (i, v) in ds.views.iter().enumerate() {
        let img = render_image(&ck.model, &v.pose, &settings, grid.as_ref())?;
        let path = a.out.join(format!("r_{i}.png"));
        save_png(&img, &path)?;
        println!("{}", path.display());
    }
    cfg.write_resolved(&a.out)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub downscale: Option<u32>,
    /// Directory for metrics.csv and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
}

impl EvalArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let r = &mut cfg.render;
        if let Some(s) = &self.split {
            r.split = s.clone();
        }
        r.downscale = self.downscale.unwrap_or(r.downscale);
    }
}

fn eval_cmd<T: Scalar>(cfg: &RunConfig, a: &EvalArgs, force: bool) -> Result<()> {
    claim_dir(&a.out, force)?;
    let ds = load_split(&a.data, &cfg.render.split, cfg.render.downscale)?;
    if ds.views.is_empty() {
        bail!(Error::Validation(format!("split {} has no views", cfg.render.split)));
    }
    let (ck, settings, grid) = load_trained::<T>(&a.checkpoint, a.grid.as_deref(), &ds, cfg.render.chunk_rays)?;
    let mut w = csv_writer(&a.out.join("metrics.csv"))?;
    w.write_record(["view", "psnr", "ssim"])?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "{:>6} {:>10} {:>8}", "view", "psnr", "ssim")?;
    let (mut sp, mut ss) = (0.0, 0.0);
    for (i, v) in ds.views.iter().enumerate() {
        let img = render_image(&ck.model, &v.pose, &settings, grid.as_ref())?;
        let p = psnr(&img, &v.image)?;
        let s = ssim(&img, &v.image)?;
        sp += p;
        ss += s;
        w.write_record([i.to_string(), format!("{p:.4}"), format!("{s:.5}")])?;
        writeln!(out, "{i:>6} {p:>10.4} {s:>8.5}")?;
    }
    let n = ds.views.len() as f64;
    w.write_record(["mean".to_string(), format!("{:.4}", sp / n), format!("{:.5}", ss / n)])?;
    w.flush()?;
    writeln!(out, "{:>6} {:>10.4} {:>8.5}", "mean", sp / n, ss / n)?;
    cfg.write_resolved(&a.out)
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Grid used by the vax configurations.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub timed_steps: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

impl BenchArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let b = &mut cfg.bench;
        b.warmup_steps = self.warmup_steps.unwrap_or(b.warmup_steps);
        b.timed_steps = self.timed_steps.unwrap_or(b.timed_steps);
        b.runs = self.runs.unwrap_or(b.runs);
        if let Some(g) = &self.grid {
            cfg.train.grid_path = Some(g.clone());
        }
        if b.configs.is_empty() {
            // Baseline at [train]'s sample counts against single-network
            // vax at the same total samples per ray.
            let (nc, nf) = (cfg.train.n_coarse, cfg.train.n_fine);
            let mut base = toml::Table::new();
            base.insert("mode".into(), "baseline".into());
            let mut vax = toml::Table::new();
            vax.insert("mode".into(), "vax_single".into());
            vax.insert("n_coarse".into(), toml::Value::Integer((nc + nf) as i64));
            vax.insert("n_fine".into(), toml::Value::Integer(0));
            b.configs = vec![base, vax];
        }
    }
}

fn bench_cmd<T: Scalar>(cfg: &RunConfig, a: &BenchArgs, force: bool) -> Result<()> {
    let configs = cfg.bench_configs()?;
    claim_file(&a.out, force)?;
    let ds = load_dataset(&a.data, Split::Train)?;
    let needs_grid = configs.iter().any(|c| c.mode.uses_hull());
    let grid = match (&cfg.train.grid_path, needs_grid) {
        (Some(p), true) => Some(load_grid(p)?),
        (None, true) => return Err(Error::Config("vax configurations need --grid".into()).into()),
        _ => None,
    };
    let rows = bench_sampling::<T>(&ds, grid.as_ref(), &configs, &cfg.bench.settings())?;
    save_bench_csv(&rows, &a.out)?;
    write_resolved_beside(cfg, &a.out)?;
    for r in &rows {
        println!(
            "{:<16} samples/batch {:>12.1}  rays/s {:>10.1}  occupancy {:.4}  speedup {:.3}",
            r.method, r.samples_per_batch, r.rays_per_sec, r.occupancy_fraction, r.speedup
        );
    }
    Ok(())
}
