use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neural-sheaf"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

fn train_small(dir: &Path, label: &str) -> std::path::PathBuf {
    let out = run(
        dir,
        &[
            "--label",
            label,
            "train",
            "--task",
            "paraboloid",
            "--arch",
            "2,4,1",
            "--n-train",
            "20",
            "--n-test",
            "10",
            "--steps",
            "200",
            "--record-every",
            "100",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    dir.join(format!("train-{label}"))
}

#[test]
fn dataset_command_writes_csv_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["--seed", "3", "dataset", "--task", "saddle", "--n", "7"],
    );
    assert_eq!(out.status.code(), Some(0));
    let dir = tmp.path().join("dataset-seed3");
    assert_eq!(csv_header(&dir.join("dataset.csv")), ["x1", "x2", "y"]);
    let rows = csv::Reader::from_path(dir.join("dataset.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(rows, 7);
    let cfg = json(&dir.join("config.json"));
    assert_eq!(cfg["dataset"]["kind"], "saddle");
    assert_eq!(cfg["dataset"]["seed"], 3);
    assert!(dir.join("summary.json").exists());
}

#[test]
fn train_then_converge_and_diagnose() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train_small(tmp.path(), "small");
    let hist = csv_header(&run_dir.join("history.csv"));
    assert_eq!(&hist[..3], ["step", "train_loss", "test_loss"]);
    let steps: Vec<String> = csv::Reader::from_path(run_dir.join("history.csv"))
        .unwrap()
        .records()
        .map(|r| r.unwrap()[0].to_string())
        .collect();
    assert_eq!(steps, ["0", "100", "200"]);

    let model = run_dir.join("model.json");
    let out = run(
        tmp.path(),
        &[
            "--label",
            "c",
            "converge",
            "--model",
            model.to_str().unwrap(),
            "--input",
            "-0.5,1.0",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = json(&tmp.path().join("converge-c/summary.json"));
    assert_eq!(summary["converged"], true);
    assert!(summary["final_gap"].as_f64().unwrap() < 1e-8);
    assert!(tmp.path().join("converge-c/trajectory.csv").exists());
    assert!(tmp.path().join("converge-c/crossings.csv").exists());

    let out = run(
        tmp.path(),
        &[
            "--label",
            "d",
            "diagnose",
            "--model",
            model.to_str().unwrap(),
            "--mode",
            "spectrum",
            "--inputs",
            "5",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let spectrum = json(&tmp.path().join("diagnose-spectrum-d/spectrum.json"));
    assert!(spectrum.to_string().contains("lambda1"));
    assert!(tmp.path().join("diagnose-spectrum-d/block_energy.csv").exists());
}

#[test]
fn missing_model_is_a_usage_error_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["converge", "--model", "/nonexistent/m.json", "--input", "0,0"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/m.json"));
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn large_beta_diverges_with_runtime_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &["train", "--task", "paraboloid", "--beta", "10", "--steps", "2000"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn unknown_config_key_and_bad_flag_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"train": {"stepz": 3}}"#).unwrap();
    let out = run(tmp.path(), &["--config", cfg.to_str().unwrap(), "dataset"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(tmp.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"arch": [2, 3, 4], "dataset": {"kind": "blobs", "n_train": 16, "n_test": 8},
            "train": {"steps": 50, "record_every": 25}}"#,
    )
    .unwrap();
    let out = run(
        tmp.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--label",
            "ce",
            "train",
            "--steps",
            "30",
            "--record-every",
            "30",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("train-ce");
    let saved = json(&dir.join("config.json"));
    assert_eq!(saved["train"]["steps"], 30);
    assert_eq!(saved["train"]["loss"], "cross_entropy");
    assert_eq!(saved["train"]["output_activation"], "softmax");
    let header = csv_header(&dir.join("history.csv"));
    assert!(header.contains(&"train_accuracy".to_string()));
}

#[test]
fn beta_sweep_writes_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(
        tmp.path(),
        &[
            "--label",
            "s",
            "sweep",
            "--kind",
            "beta",
            "--grid",
            "0.5,1,2",
            "--task",
            "paraboloid",
            "--arch",
            "2,3,1",
            "--n-train",
            "10",
            "--n-test",
            "10",
            "--steps",
            "100",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut r = csv::Reader::from_path(tmp.path().join("sweep-s/sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let beta: f64 = rows[1][1].parse().unwrap();
    assert!((beta - 0.1).abs() < 1e-15);
    assert!(rows.iter().all(|row| &row[5] == "ok"));
}

#[test]
fn sgd_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let sheaf_dir = train_small(tmp.path(), "a");
    let out = run(
        tmp.path(),
        &[
            "--label",
            "b",
            "sgd",
            "--task",
            "paraboloid",
            "--arch",
            "2,4,1",
            "--n-train",
            "20",
            "--n-test",
            "10",
            "--epochs",
            "50",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a = sheaf_dir.join("model.json");
    let b = tmp.path().join("sgd-b/model.json");
    let out = run(
        tmp.path(),
        &[
            "--label",
            "cmp",
            "compare",
            "--model-a",
            a.to_str().unwrap(),
            "--model-b",
            b.to_str().unwrap(),
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(tmp.path().join("compare-cmp/summary.json").exists());
}
