use std::path::Path;
use std::process::{Command, Output};

use vaxnerf::hull::load_grid;
use vaxnerf::training::load_checkpoint;

fn vaxnerf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaxnerf")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = vaxnerf(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    vaxnerf(args, cwd).status.code().expect("exit code")
}

const TINY: &str = r#"
seed = 5
threads = 1

[synth]
train_views = 12
val_views = 2
test_views = 2
resolution = 24

[carve]
resolution = 32
dilation = 1

[train]
mode = "vax_single"
n_coarse = 16
n_fine = 0
batch_rays = 64
iterations = 12
log_every = 4
checkpoint_every = 6
val_every = 12
val_downscale = 1
shard_rays = 32
grid_path = "grid.bin"
network = { depth = 2, width = 16, color_width = 8, skip = 1 }

[bench]
warmup_steps = 1
timed_steps = 2
runs = 1
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(&["--config", "run.toml", "synth", "--out", "data"], dir.path());
    dir
}

#[test]
fn pipeline_end_to_end() {
    let ws = workspace();
    let d = ws.path();
    assert!(d.join("data/transforms_train.json").exists());
    assert!(d.join("data/resolved_config.toml").exists());

    let printed = ok(&["--config", "run.toml", "carve", "--data", "data", "--out", "grid.bin"], d);
    let grid = load_grid(&d.join("grid.bin")).unwrap();
    let reported: f64 = printed.trim().strip_prefix("occupancy fraction: ").unwrap().parse().unwrap();
    assert_eq!(reported, grid.occupancy_fraction());
    assert!(d.join("grid.bin.config.toml").exists());

    ok(&["--config", "run.toml", "train", "--data", "data", "--out", "run"], d);
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "iter,wall_s,loss,points,rays_per_s,val_psnr");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(!rows[2].ends_with(','), "final row carries validation PSNR: {}", rows[2]);
    assert!(d.join("run/checkpoint_00000006.ckpt").exists());
    let ck = load_checkpoint::<f32>(&d.join("run/final.ckpt")).unwrap();
    assert_eq!(ck.training.unwrap().iteration, 12);

    ok(&["--config", "run.toml", "render", "--checkpoint", "run/final.ckpt", "--data", "data", "--out", "img"], d);
    assert!(d.join("img/r_0.png").exists() && d.join("img/r_1.png").exists());

    let table = ok(&["--config", "run.toml", "eval", "--checkpoint", "run/final.ckpt", "--data", "data", "--out", "ev"], d);
    assert!(table.lines().last().unwrap().trim_start().starts_with("mean"));
    let metrics = std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert!(metrics.starts_with("view,psnr,ssim\n"));

    ok(&["--config", "run.toml", "bench", "--data", "data", "--grid", "grid.bin", "--out", "bench.csv"], d);
    let bench = std::fs::read_to_string(d.join("bench.csv")).unwrap();
    let mut lines = bench.lines();
    assert_eq!(lines.next().unwrap(), "method,samples_per_batch,rays_per_sec,occupancy_fraction,speedup");
    assert!(lines.next().unwrap().starts_with("c16,"));
    assert!(lines.next().unwrap().starts_with("vax_c16,"));
}

#[test]
fn resolved_config_reproduces_training() {
    let ws = workspace();
    let d = ws.path();
    ok(&["--config", "run.toml", "carve", "--data", "data", "--out", "grid.bin"], d);
    ok(&["--config", "run.toml", "--seed", "9", "train", "--data", "data", "--out", "a", "--iterations", "8"], d);
    ok(&["--config", "a/resolved_config.toml", "train", "--data", "data", "--out", "b"], d);
    let losses = |p: &str| -> Vec<String> {
        std::fs::read_to_string(d.join(p)).unwrap().lines().map(|l| l.split(',').nth(2).unwrap().to_string()).collect()
    };
    assert_eq!(losses("a/train_log.csv"), losses("b/train_log.csv"));
    let a = load_checkpoint::<f32>(&d.join("a/final.ckpt")).unwrap();
    let b = load_checkpoint::<f32>(&d.join("b/final.ckpt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.training.unwrap().config.seed, 9);
}

#[test]
fn zero_iterations_writes_initial_checkpoint() {
    let ws = workspace();
    let d = ws.path();
    ok(&["--config", "run.toml", "train", "--data", "data", "--out", "r", "--mode", "baseline", "--iterations", "0"], d);
    let ck = load_checkpoint::<f32>(&d.join("r/final.ckpt")).unwrap();
    assert_eq!(ck.training.unwrap().iteration, 0);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ws = workspace();
    let d = ws.path();
    let base = ["--config", "run.toml", "train", "--data", "data", "--mode", "baseline"];
    ok(&[&base[..], &["--out", "full"]].concat(), d);
    ok(&[&base[..], &["--out", "half", "--iterations", "12", "--checkpoint-every", "6"]].concat(), d);
    ok(&["train", "--data", "data", "--out", "rest", "--resume", "half/checkpoint_00000006.ckpt"], d);
    let full = load_checkpoint::<f32>(&d.join("full/final.ckpt")).unwrap();
    let rest = load_checkpoint::<f32>(&d.join("rest/final.ckpt")).unwrap();
    assert_eq!(full.model, rest.model);
    assert_eq!(full.optimizer, rest.optimizer);
}

#[test]
fn exit_codes() {
    let ws = workspace();
    let d = ws.path();
    // Existing output without --force.
    assert_eq!(code(&["--config", "run.toml", "synth", "--out", "data"], d), 2);
    assert_eq!(code(&["--config", "run.toml", "--force", "synth", "--out", "data"], d), 0);
    // Unknown flag value and unknown subcommand.
    assert_eq!(code(&["train", "--data", "data", "--out", "x", "--mode", "fast"], d), 2);
    assert_eq!(code(&["frobnicate"], d), 2);
    // Bad config file.
    std::fs::write(d.join("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "train", "--data", "data", "--out", "x"], d), 2);
    // Vax mode without a grid is a configuration problem.
    assert_eq!(code(&["train", "--data", "data", "--out", "y", "--mode", "vax_single", "--n-fine", "0"], d), 2);
    // Missing data.
    assert_eq!(code(&["carve", "--data", "nowhere", "--out", "g.bin"], d), 3);
    assert_eq!(code(&["eval", "--checkpoint", "missing.ckpt", "--data", "data", "--out", "e"], d), 3);
    // A single benchmark configuration.
    std::fs::write(d.join("one.toml"), "[[bench.configs]]\nmode = \"baseline\"\n").unwrap();
    assert_eq!(code(&["--config", "one.toml", "bench", "--data", "data", "--out", "b.csv"], d), 2);
}

#[test]
fn diverging_training_exits_numeric_with_dump() {
    let ws = workspace();
    let d = ws.path();
    let args = ["--config", "run.toml", "train", "--data", "data", "--out", "boom", "--mode", "baseline"];
    let out = vaxnerf(&[&args[..], &["--lr-init", "1e30", "--lr-final", "1e30"]].concat(), d);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("boom/crash_dump.ckpt").exists());
}
