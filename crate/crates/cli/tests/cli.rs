//! End-to-end runs of the cldpc binary on a miniature problem: dataset
//! generation determinism, the two trainings, every control method, bench
//! aggregation with its exact call-count identities, plotting, and the
//! config-error exit code.

use cldpc_cli::results::{load_result, recompute_j};
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cldpc"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().expect("binary runs").status.code().unwrap_or(-1)
}

const TINY: &str = "\
[schedule]
k = 40

[env]
d_x = 16
substeps = 8
n_ctrl = 8

[data]
m = 8

[model]
horizon = 4
channels = 8
depth = 2
embed_dim = 8

[train]
steps = 30
batch = 4

[control]
episodes = 2
ddim_steps = 5
";

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("config.ini");
    std::fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn metrics_rows(out_dir: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,setting,seed,J,nfe,wall_clock_s,K,H,N,h,ddim_steps,lambda"
    );
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn dataset_generation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&["gen-data", "--config", &cfg, "--out", out_a.to_str().unwrap()]);
    run_ok(&["gen-data", "--config", &cfg, "--out", out_b.to_str().unwrap()]);
    let a = std::fs::read(out_a.join("dataset.cldpc")).unwrap();
    let b = std::fs::read(out_b.join("dataset.cldpc")).unwrap();
    assert!(!a.is_empty() && a == b);
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(exit_code(&["gen-data", "--config", &cfg, "--out", out, "--set", "env.dx=16"]), 2);
    assert_eq!(exit_code(&["gen-data", "--config", &cfg, "--out", out, "--set", "env.d_x=zero"]), 2);
    assert_eq!(exit_code(&["control", "--config", &cfg, "--out", out, "--method", "warp"]), 2);
    assert_eq!(exit_code(&["control", "--config", &cfg, "--out", out, "--method", "dpc-h"]), 2);
    let bad = dir.path().join("bad.ini");
    std::fs::write(&bad, "[schedule]\nk = 40\nrho = 3\n").unwrap();
    assert_eq!(exit_code(&["gen-data", "--config", bad.to_str().unwrap(), "--out", out]), 2);
}

#[test]
fn pipeline_controls_benches_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();

    run_ok(&["gen-data", "--config", &cfg, "--out", out]);
    run_ok(&["train-sync", "--config", &cfg, "--out", out]);
    run_ok(&["train-async", "--config", &cfg, "--out", out]);
    assert!(out_dir.join("sync/model.cldpc").exists());
    assert!(out_dir.join("async/model.cldpc").exists());
    assert!(out_dir.join("sync/loss.csv").exists());

    run_ok(&["control", "--config", &cfg, "--out", out, "--method", "cl"]);
    let rows = metrics_rows(&out_dir);
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row[0], "cl");
        assert_eq!(row[4], "110");
        let e: u64 = row[2].parse().unwrap();
        let stored = load_result(&out_dir.join(format!("results/cl_{e:03}.cldpc"))).unwrap();
        let j: f64 = row[3].parse().unwrap();
        assert!((recompute_j(&stored) - j).abs() <= 1e-9);
    }

    run_ok(&["bench", "--config", &cfg, "--out", out, "--set", "control.h=3"]);
    let rows = metrics_rows(&out_dir);
    assert_eq!(rows.len(), 8);
    let nfe_of = |method: &str| -> Vec<usize> {
        rows.iter().filter(|r| r[0] == method).map(|r| r[4].parse().unwrap()).collect()
    };
    assert_eq!(nfe_of("cl"), vec![110, 110]);
    assert_eq!(nfe_of("cl-ddim"), vec![55, 55]);
    assert_eq!(nfe_of("dpc-h"), vec![120, 120]);
    assert_eq!(nfe_of("random"), vec![0, 0]);

    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,setting,episodes,failed,mean_J,mean_nfe,mean_wall_clock_s\n"));
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.contains("\ncl-ddim,fo,2,0,"));

    let trace = out_dir.join("results/cl_000.cldpc");
    let metrics = out_dir.join("metrics.csv");
    run_ok(&[
        "plot",
        "--out",
        out,
        trace.to_str().unwrap(),
        metrics.to_str().unwrap(),
    ]);
    let heat = std::fs::read_to_string(out_dir.join("cl_000.svg")).unwrap();
    assert!(heat.starts_with("<svg") && heat.contains("id=\"diff\""));
    let dist = std::fs::read_to_string(out_dir.join("j_distribution.svg")).unwrap();
    assert!(dist.starts_with("<svg") && dist.contains(">random<"));
}

#[test]
fn control_without_models_needs_only_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("r");
    let out = out_dir.to_str().unwrap();
    run_ok(&["gen-data", "--config", &cfg, "--out", out]);
    let stdout = run_ok(&["control", "--config", &cfg, "--out", out, "--method", "random"]);
    assert!(stdout.contains("random"));
    assert_eq!(metrics_rows(&out_dir).len(), 2);
}
