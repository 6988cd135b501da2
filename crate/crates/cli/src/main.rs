//! `vaxnerf`: synthesize scenes, carve hulls, train, render, evaluate, benchmark.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Precision, RunConfig};

/// Exit status for bad invocations, configs, and refused overwrites.
pub const EXIT_USAGE: u8 = 2;
/// Exit status for unreadable or inconsistent inputs.
pub const EXIT_DATA: u8 = 3;
/// Exit status for numeric breakdown during training.
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "vaxnerf", version, about = "Radiance fields with visual-hull sample rejection")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Float width of the network and checkpoints.
    #[arg(long, global = true, value_enum)]
    pub precision: Option<Precision>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render an analytic scene into train/val/test splits.
    Synth(commands::SynthArgs),
    /// Carve a visual hull from the training masks.
    Carve(commands::CarveArgs),
    /// Train a model and write checkpoints and a log.
    Train(commands::TrainArgs),
    /// Render a split's poses from a checkpoint to PNG.
    Render(commands::RenderArgs),
    /// PSNR and SSIM of a checkpoint on a split.
    Eval(commands::EvalArgs),
    /// Throughput of several training configurations.
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}

impl Global {
    /// The file config (or defaults) with global flags applied.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.apply_seed();
        Ok(cfg)
    }
}
