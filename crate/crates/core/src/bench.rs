//! Training-throughput benchmark: samples per batch and rays per second for
//! each configuration, relative to a baseline.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hull::VoxelGrid;
use crate::scalar::Scalar;
use crate::scene::Dataset;
use crate::training::{TrainConfig, TrainMode, Trainer};

pub const BENCH_HEADER: [&str; 5] = ["method", "samples_per_batch", "rays_per_sec", "occupancy_fraction", "speedup"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub warmup_steps: usize,
    pub timed_steps: usize,
    /// Timed repetitions; the median throughput is reported.
    pub runs: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { warmup_steps: 20, timed_steps: 200, runs: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    /// Mean network evaluations per training step.
    pub samples_per_batch: f64,
    pub rays_per_sec: f64,
    /// Occupied fraction of the grid; 1 for configurations without a hull.
    pub occupancy_fraction: f64,
    pub speedup: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every configuration on the same data and seed.
///
/// The first `baseline` configuration is the speedup reference; at least two
/// configurations are required.
pub fn bench_sampling<T: Scalar>(
    dataset: &Dataset,
    grid: Option<&VoxelGrid>,
    configs: &[TrainConfig],
    settings: &BenchSettings,
) -> Result<Vec<BenchRow>> {
    if configs.len() < 2 {
        return Err(Error::Config(format!("benchmark needs at least 2 configurations, got {}", configs.len())));
    }
    let Some(base_idx) = configs.iter().position(|c| c.mode == TrainMode::Baseline) else {
        return Err(Error::Config("benchmark needs a baseline configuration".into()));
    };
    if settings.timed_steps == 0 || settings.runs == 0 {
        return Err(Error::Config("benchmark needs timed_steps and runs above zero".into()));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut cfg = cfg.clone();
        cfg.iterations = (settings.warmup_steps + settings.timed_steps * settings.runs) as u64;
        let hull = if cfg.mode.uses_hull() { grid.cloned() } else { None };
        let occupancy = hull.as_ref().map_or(1.0, VoxelGrid::occupancy_fraction);
        let mut trainer = Trainer::<T>::new(cfg.clone(), dataset, hull)?;
        for _ in 0..settings.warmup_steps {
            trainer.step(dataset)?;
        }
        let mut throughput = Vec::with_capacity(settings.runs);
        let mut points = 0u64;
        for _ in 0..settings.runs {
            let mut seconds = 0.0;
            for _ in 0..settings.timed_steps {
                let st = trainer.step(dataset)?;
                seconds += st.seconds;
                points += st.points as u64;
            }
            throughput.push((settings.timed_steps * cfg.batch_rays) as f64 / seconds.max(1e-12));
        }
        let samples = points as f64 / (settings.timed_steps * settings.runs) as f64;
        log::info!("{}: {samples:.0} samples/batch", cfg.label());
        rows.push(BenchRow {
            method: cfg.label(),
            samples_per_batch: samples,
            rays_per_sec: median(throughput),
            occupancy_fraction: occupancy,
            speedup: 0.0,
        });
    }
    let base = rows[base_idx].rays_per_sec;
    for r in &mut rows {
        r.speedup = r.rays_per_sec / base;
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Validation(format!("writing benchmark: {e}"));
    w.write_record(BENCH_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("{:.1}", r.samples_per_batch),
            format!("{:.1}", r.rays_per_sec),
            format!("{:.6}", r.occupancy_fraction),
            format!("{:.4}", r.speedup),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("benchmark csv", e))
}

pub fn save_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_bench_csv(rows, std::io::BufWriter::new(file))
}
