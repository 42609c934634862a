//! End-to-end smoke tests of the binary's surfaces.

use std::fs;
use std::path::Path;
use std::process::Command;

fn arising() -> Command {
    Command::new(env!("CARGO_BIN_EXE_arising"))
}

#[test]
fn paths_emits_csv_and_metrics() {
    let out = arising()
        .args(["paths", "--kind", "zigzag", "--L", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout, "t,x,y\n0,0,0\n1,1,0\n2,0,1\n3,1,1\n");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&stderr).unwrap();
    assert_eq!(metrics["max_step"], 2);
}

#[test]
fn paths_rejects_bad_side() {
    let out = arising()
        .args(["paths", "--kind", "hilbert", "--L", "6"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn oracle_reports_uniform_entropy_at_beta_zero() {
    let out = arising()
        .args(["oracle", "--L", "2", "--beta", "0"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let entropy = v["entropy"].as_f64().unwrap();
    assert!((entropy - 4.0 * std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn sample_train_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("l2.txt");
    let status = arising()
        .args(["sample", "--L", "2", "--beta", "0.435", "--n", "60", "--seed", "5"])
        .args(["--equilibration", "50", "--out"])
        .arg(&dataset)
        .status()
        .unwrap();
    assert!(status.success());
    let text = fs::read_to_string(&dataset).unwrap();
    assert!(text.starts_with("{\"L\":2,"));
    assert_eq!(text.lines().count(), 61);

    let run_dir = dir.path().join("run");
    let status = arising()
        .args(["train", "--model", "rnn", "--path", "snake", "--epochs", "2"])
        .args(["--batch", "16", "--seed", "3", "--checkpoints", "1"])
        .args(["--n-model-samples", "50", "--dataset"])
        .arg(&dataset)
        .arg("--out")
        .arg(&run_dir)
        .status()
        .unwrap();
    assert!(status.success());
    let trace = fs::read_to_string(run_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,train_nll,val_nll\n"));
    assert_eq!(trace.lines().count(), 4);
    assert!(run_dir.join("model.ckpt").exists());
    let checkpoints: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("checkpoints.json")).unwrap())
            .unwrap();
    assert_eq!(checkpoints.as_array().unwrap().len(), 1);
}

#[test]
fn experiment_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "name": "smoke",
        "kind": "path_comparison",
        "model": "rnn",
        "paths": ["zigzag", "snake"],
        "sizes": [2],
        "betas": [0.435],
        "seeds": [1, 2],
        "dataset": {"n_samples": 50, "equilibration_sweeps": 30, "seed": 11},
        "train": {"epochs": 2, "batch_size": 10, "checkpoint_epochs": [1], "n_model_samples": 80}
    });
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    let bundle = dir.path().join("bundle");
    let status = arising()
        .args(["experiment", "run"])
        .arg(&spec_path)
        .arg("--out")
        .arg(&bundle)
        .args(["--workers", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(bundle.join("manifest.json").exists());
    assert_eq!(count_cells(&bundle), 4);

    let out = arising()
        .args(["experiment", "report"])
        .arg(&bundle)
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["figure"], "fig2a");
    assert_eq!(summary["groups"].as_array().unwrap().len(), 2);
    assert!(bundle.join("report/fig2a.csv").exists());
}

fn count_cells(bundle: &Path) -> usize {
    fs::read_dir(bundle.join("cells")).unwrap().count()
}
