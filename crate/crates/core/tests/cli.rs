#![cfg(feature = "cli")]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn loramoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loramoe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&loramoe(&["--help"])), 0);
    let unknown = loramoe(&["grad-check", "--bogus"]);
    assert_eq!(code(&unknown), 1);
    assert!(text(&unknown.stderr).contains("--bogus"));
    assert_eq!(code(&loramoe(&["no-such-command"])), 1);
    assert_eq!(code(&loramoe(&["train", "--precision", "f16"])), 1);
}

#[test]
fn missing_config_is_a_validation_error() {
    let out = loramoe(&["train", "--config", "missing.json"]);
    assert_eq!(code(&out), 1);
    assert!(text(&out.stderr).contains("missing.json"));
}

#[test]
fn invalid_config_reports_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"kind": "mixture-sweep", "mixture": {"p1": 0.9, "n": 0}}"#).unwrap();
    let out = loramoe(&["sweep-m", "--config", path(&cfg)]);
    assert_eq!(code(&out), 1);
    let err = text(&out.stderr);
    assert!(err.contains("p1") && err.contains(".n"), "{err}");

    fs::write(&cfg, r#"{"kind": "forgetting"}"#).unwrap();
    assert_eq!(code(&loramoe(&["sweep-m", "--config", path(&cfg)])), 1);
}

#[test]
fn grad_check_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = loramoe(&["grad-check", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("max relative error"));
    assert!(dir.path().join("report.json").exists());
    let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"version\"") && manifest.contains("grad-check"));
}

#[test]
fn sweep_prints_best_weight() {
    let dir = tempfile::tempdir().unwrap();
    let out = loramoe(&["sweep-m", "--p1", "0.3", "--grid-step", "0.05", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let best: f64 = stdout.trim().strip_prefix("best_m ").unwrap().parse().unwrap();
    assert!((0.25..=0.35).contains(&best), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(csv.starts_with("m,loglik,mu1',mu2',var1',var2',converged"));
    assert_eq!(csv.lines().count(), 1 + 19);
}

#[test]
fn train_then_route_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    fs::write(
        &cfg,
        r#"{"kind": "balance", "optim": {"steps": 20, "log_every": 5}, "data": {"eval_samples": 64}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = loramoe(&["train", "--config", path(&cfg), "--out", path(&run), "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 13);
    // Steps 0, 5, 10, 15 plus the closing row.
    assert_eq!(metrics.lines().count(), 1 + 5);
    assert!(run.join("checkpoint.bin").exists());

    let dump = dir.path().join("dump");
    let out = loramoe(&["route-dump", "--checkpoint", path(&run), "--out", path(&dump)]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    let rows = fs::read_to_string(dump.join("routing.csv")).unwrap();
    assert!(rows.starts_with("sample_id,sample_type,layer,expert_id,group,mean_weight"));
    // 128 held-out samples × 4 layers × 6 experts.
    assert_eq!(rows.lines().count(), 1 + 128 * 4 * 6);
}

#[test]
fn route_dump_without_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = loramoe(&["route-dump", "--checkpoint", path(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_writes_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = loramoe(&["gen-data", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).trim(), "pretrain 2048 finetune 2048 eval-a 512 eval-b 512");
    let csv = fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2048 + 2048 + 512 + 512);
}

#[test]
fn in_process_entry_point_matches_binary() {
    let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
    let code = loramoe::harness::cli::cli_main(["loramoe", "train", "--config", "missing.json"], &mut stdout, &mut stderr);
    assert_eq!(code, 1);
    assert!(text(&stderr).contains("missing.json"));
}
