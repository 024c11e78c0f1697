//! End-to-end runs of the `scaffolding` binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scaffolding"))
        .args(args)
        .current_dir(dir)
        .env_remove("SCAFFOLDING_OUT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&run(dir.path(), &["partition", "--coords", "0"])), 2);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn bad_config_names_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", "{\n  \"kind\": \"digitlike\",\n  \"b_grid\": \"four\"\n}\n");
    let out = run(dir.path(), &["sweep", "--config", "bad.json", "--out", "s"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("b_grid") && err.contains("line 3"), "{err}");

    write(dir.path(), "unknown.json", r#"{"kind": "digitlike", "bins": 4}"#);
    let out = run(dir.path(), &["sweep", "--config", "unknown.json", "--out", "s"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bins"), "{}", stderr(&out));

    write(dir.path(), "invalid.json", r#"{"kind": "digitlike", "pi": 1.5}"#);
    assert_eq!(code(&run(dir.path(), &["sweep", "--config", "invalid.json", "--out", "s"])), 2);
}

#[test]
fn generate_partition_calibrate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "c.json", r#"{"kind": "accuracy_vs_bins", "n_grid": [2000], "seeds": [1]}"#);
    assert_eq!(code(&run(d, &["generate", "--config", "c.json", "--out", "train"])), 0);
    assert_eq!(code(&run(d, &["generate", "--config", "c.json", "--out", "fresh", "--seed", "2"])), 0);
    assert!(d.join("train/data_seed1.csv").exists() && d.join("fresh/data_seed2.csv").exists());

    let data = "train/data_seed1.csv";
    let out = run(d, &["partition", "--data", data, "--coords", "0", "-b", "1", "--out", "m", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = run(d, &["calibrate", "--data", data, "--partition", "m/partition.json", "--out", "m", "--seed", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let pred: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m/predictor.json")).unwrap()).unwrap();
    let values = pred["values"].as_array().unwrap();
    assert_eq!(values.len(), 1);
    let v = values[0].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&v));

    let out = run(d, &["evaluate", "--predictor", "m/predictor.json", "--data", "fresh/data_seed2.csv", "--out", "e"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e/report.json")).unwrap()).unwrap();
    let gap = report["report"]["max_gap"].as_f64().unwrap();
    assert!(gap.is_finite() && gap >= 0.0);
    assert!(report["mse_vs_truth"].as_f64().unwrap() >= 0.0);
    assert!(d.join("e/report.csv").exists());
}

#[test]
fn calibrate_rejects_a_different_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "c.json", r#"{"kind": "accuracy_vs_bins", "n_grid": [1000], "seeds": [3]}"#);
    assert_eq!(code(&run(d, &["generate", "--config", "c.json", "--out", "g"])), 0);
    let data = "g/data_seed3.csv";
    assert_eq!(code(&run(d, &["partition", "--data", data, "--coords", "0,1", "-b", "2", "--out", "m", "--seed", "3"])), 0);
    let out = run(d, &["calibrate", "--data", data, "--partition", "m/partition.json", "--out", "m", "--seed", "4"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
    let out = run(d, &["calibrate", "--data", data, "--partition", "m/partition.json", "--out", "m", "--seed", "3", "--pi", "0.3"]);
    assert_eq!(code(&out), 2);
    assert!(!d.join("m/predictor.json").exists());
}

#[test]
fn sweeps_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "c.json",
        r#"{"kind": "calibration_rate", "n_grid": [1024, 2048, 4096, 8192], "seeds": [0, 1, 2], "n_eval": 5000}"#,
    );
    let a = run(d, &["sweep", "--config", "c.json", "--out", "a", "--threads", "1"]);
    let b = run(d, &["sweep", "--config", "c.json", "--out", "b", "--threads", "2"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    for file in ["results.csv", "summary.json"] {
        let x = std::fs::read(d.join("a").join(file)).unwrap();
        let y = std::fs::read(d.join("b").join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file} differs");
    }
    let csv = std::fs::read_to_string(d.join("a/results.csv")).unwrap();
    assert!(csv.starts_with("# schema=1 kind=calibration_rate"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 4 * 3);
}

#[test]
fn accept_runs_selected_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["accept", "--only", "8", "--out", "acc"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[PASS] 8."), "{text}");
    assert!(!text.contains("[PASS] 1."));
}
