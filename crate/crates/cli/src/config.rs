//! Run configuration: one TOML tree holding every command's settings.
//!
//! ```toml
//! seed = 7
//! precision = "f32"
//!
//! [synth]
//! scene = { kind = "sphere", center = [0.0, 0.0, 0.0], radius = 0.5, albedo = [0.85, 0.35, 0.2] }
//! train_views = 40
//! resolution = 64
//!
//! [carve]
//! resolution = 128
//! dilation = 1
//!
//! [train]
//! mode = "vax_single"
//! n_coarse = 64
//! n_fine = 0
//! iterations = 2000
//! network = { depth = 4, width = 64, color_width = 32, skip = 2 }
//!
//! [[bench.configs]]
//! mode = "baseline"
//! ```
//!
//! Command-line flags override file values; each command writes the resolved
//! tree next to its outputs as `resolved_config.toml`.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vaxnerf::bench::BenchSettings;
use vaxnerf::hull::DESK_RESOLUTION;
use vaxnerf::scene::{CameraRig, SceneSpec};
use vaxnerf::training::TrainConfig;
use vaxnerf::Error;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub train_views: usize,
    pub val_views: usize,
    pub test_views: usize,
    pub resolution: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default_sphere(),
            rig: CameraRig::default(),
            train_views: 40,
            val_views: 4,
            test_views: 4,
            resolution: 64,
        }
    }
}

/// Dilation is a fixed radius or derived from the samples per ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dilation {
    Cells(usize),
    /// `"auto"`: `ceil(resolution / samples_per_ray)`.
    Rule(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarveConfig {
    pub resolution: usize,
    pub dilation: Dilation,
    /// Samples per ray used by the automatic dilation rule.
    pub samples_per_ray: usize,
}

impl Default for CarveConfig {
    fn default() -> Self {
        Self { resolution: DESK_RESOLUTION, dilation: Dilation::Cells(1), samples_per_ray: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub split: String,
    pub chunk_rays: usize,
    /// Integer factor dividing the stored image size.
    pub downscale: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { split: "test".into(), chunk_rays: 1024, downscale: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub warmup_steps: usize,
    pub timed_steps: usize,
    pub runs: usize,
    /// Each entry is a partial `[train]` table layered over `[train]`.
    pub configs: Vec<toml::Table>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let s = BenchSettings::default();
        Self { warmup_steps: s.warmup_steps, timed_steps: s.timed_steps, runs: s.runs, configs: Vec::new() }
    }
}

impl BenchConfig {
    pub fn settings(&self) -> BenchSettings {
        BenchSettings { warmup_steps: self.warmup_steps, timed_steps: self.timed_steps, runs: self.runs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every component seed when set.
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub precision: Precision,
    pub synth: SynthConfig,
    pub carve: CarveConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    /// Pushes the top-level seed into every stochastic component.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
        }
    }

    /// Benchmark configurations: each table overrides fields of `[train]`.
    pub fn bench_configs(&self) -> Result<Vec<TrainConfig>> {
        let base = toml::Table::try_from(&self.train).context("serializing [train]")?;
        self.bench
            .configs
            .iter()
            .enumerate()
            .map(|(i, over)| {
                let mut merged = base.clone();
                for (k, v) in over {
                    merged.insert(k.clone(), v.clone());
                }
                let mut cfg: TrainConfig = toml::Value::Table(merged)
                    .try_into()
                    .map_err(|e| Error::Config(format!("bench config {i}: {e}")))?;
                if let Some(seed) = self.seed {
                    cfg.seed = seed;
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self).context("serializing resolved config")?)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}
