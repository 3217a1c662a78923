//! Black-box tests of the `cbct-af` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbct_motion::io;
use cbct_motion::motion::MotionTrajectory;

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cbct-af-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A small acquisition and short optimizations so every command finishes
/// in seconds.
const SMALL: &str = r#"
seed = 4
output_dir = "out"

[geometry]
n_views = 36
detector_rows = 8
detector_cols = 256

[recon]
grid_size = 64

[motion]
n_nodes = 4
active_fraction = 1.0

[autofocus]
comp_nodes = 4
iqm = "entropy"

[autofocus.simplex]
max_evaluations = 20

[benchmark]
seeds = [1, 2, 3]
arms = ["entropy", "oracle_rpe"]
"#;

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbct-af"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn rpe_of_a_zero_trajectory_is_zero() {
    let dir = workdir("rpe");
    let cfg = small_config(&dir);
    io::write_trajectory(&dir.join("zero.csv"), &MotionTrajectory::identity(36)).unwrap();
    let out = run(&dir, &["--config", cfg.to_str().unwrap(), "rpe", "--trajectory", "zero.csv"]);
    assert_ok(&out);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.0");
    assert!(dir.join("out/manifest-rpe.toml").is_file());
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = workdir("simulate");
    let cfg = small_config(&dir);
    let cfg = cfg.to_str().unwrap();
    assert_ok(&run(&dir, &["--config", cfg, "--output-dir", "a", "simulate"]));
    assert_ok(&run(&dir, &["--config", cfg, "--output-dir", "b", "simulate"]));
    for name in ["clean.cbps", "corrupted.cbps", "motion.toml", "trajectory.csv", "ground_truth.cbsl"] {
        let a = std::fs::read(dir.join("a").join(name)).unwrap();
        let b = std::fs::read(dir.join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
    let manifest = std::fs::read_to_string(dir.join("a/manifest-simulate.toml")).unwrap();
    assert!(manifest.contains("corrupted.cbps") && manifest.contains("crc32"));
}

#[test]
fn seed_flag_changes_the_motion() {
    let dir = workdir("seed");
    let cfg = small_config(&dir);
    let cfg = cfg.to_str().unwrap();
    assert_ok(&run(&dir, &["--config", cfg, "--output-dir", "a", "simulate"]));
    assert_ok(&run(&dir, &["--config", cfg, "--seed", "99", "--output-dir", "b", "simulate"]));
    let a = std::fs::read(dir.join("a/motion.toml")).unwrap();
    let b = std::fs::read(dir.join("b/motion.toml")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn simulated_motion_reaches_its_target_rpe() {
    let dir = workdir("target");
    let cfg = small_config(&dir);
    let cfg = cfg.to_str().unwrap();
    assert_ok(&run(&dir, &["--config", cfg, "simulate"]));
    let out = run(&dir, &["--config", cfg, "rpe", "--trajectory", "out/trajectory.csv"]);
    assert_ok(&out);
    let value: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((value - 0.3).abs() <= 0.3 * 0.01, "{value}");
}

#[test]
fn reconstruct_and_compensate_write_their_outputs() {
    let dir = workdir("compensate");
    let cfg = small_config(&dir);
    let cfg = cfg.to_str().unwrap();
    assert_ok(&run(&dir, &["--config", cfg, "simulate"]));
    assert_ok(&run(&dir, &["--config", cfg, "reconstruct", "--stack", "out/corrupted.cbps", "--name", "mo"]));
    assert!(dir.join("out/mo.cbsl").is_file() && dir.join("out/mo.pgm").is_file());
    let out = run(
        &dir,
        &["--config", cfg, "compensate", "--stack", "out/corrupted.cbps", "--truth", "out/trajectory.csv"],
    );
    assert_ok(&out);
    let trace = std::fs::read_to_string(dir.join("out/trace.csv")).unwrap();
    assert!(trace.starts_with("evaluation,f,true_rpe"));
    assert!(dir.join("out/estimated_motion.toml").is_file());
}

#[test]
fn benchmark_reports_one_row_per_seed_and_arm() {
    let dir = workdir("benchmark");
    let cfg = small_config(&dir);
    let out = run(&dir, &["--config", cfg.to_str().unwrap(), "benchmark", "--scenario", "inverse_crime"]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(dir.join("out/inverse_crime_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(dir.join("out/inverse_crime_summary.txt").is_file());
    assert!(dir.join("out/inverse_crime_panel.png").is_file());
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = workdir("usage");
    let out = run(&dir, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--help"), "{stderr}");
    assert_eq!(run(&dir, &["benchmark"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_1_and_name_the_module() {
    let dir = workdir("runtime");
    let out = run(&dir, &["rpe", "--trajectory", "missing.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error in io:"));
    let out = run(&dir, &["benchmark", "--scenario", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error in eval:"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = workdir("config");
    std::fs::write(dir.join("bad.toml"), "sead = 3\n").unwrap();
    let out = run(&dir, &["--config", "bad.toml", "rpe", "--trajectory", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error in config:"));
}
