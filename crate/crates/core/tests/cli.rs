//! End-to-end tests of the `scl` binary: happy path across all subcommands,
//! exit-code contracts, and cross-artifact consistency.

use std::path::Path;
use std::process::{Command, Output};

fn scl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = scl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_args<'a>(out: &'a str, stream: &'a str, per_class: &'a str) -> Vec<&'a str> {
    vec![
        "gen-data",
        "--out",
        out,
        "--classes",
        "3",
        "--per-class",
        per_class,
        "--height",
        "16",
        "--width",
        "16",
        "--seed",
        "5",
        "--confusable-pairs",
        "1",
        "--stream",
        stream,
    ]
}

#[test]
fn happy_path_produces_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &gen_args("train.ds", "0", "12"));
    ok(d, &gen_args("test.ds", "1", "8"));
    ok(
        d,
        &[
            "train",
            "--data",
            "train.ds",
            "--out",
            "model.ckpt",
            "--log",
            "train.csv",
            "--iterations",
            "40",
            "--seed",
            "1",
        ],
    );
    ok(
        d,
        &[
            "eval", "--data", "test.ds", "--ckpt", "model.ckpt", "--report", "report.json",
            "--confusion", "confusion.csv",
        ],
    );
    ok(
        d,
        &["embed", "--data", "test.ds", "--ckpt", "model.ckpt", "--out", "emb.csv"],
    );
    ok(
        d,
        &[
            "embed", "--data", "test.ds", "--ckpt", "model.ckpt", "--out", "proj.csv",
            "--project", "pca2",
        ],
    );

    // Training log: header plus rows at the logging cadence.
    let log = std::fs::read_to_string(d.join("train.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iter,l_total,l_con,l_cls,temperature,batch_acc"
    );
    assert!(log.lines().count() >= 2);

    // Report accuracy must equal the confusion-matrix diagonal fraction.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    let confusion = std::fs::read_to_string(d.join("confusion.csv")).unwrap();
    let mut diag = 0u64;
    let mut total = 0u64;
    for (i, line) in confusion.lines().enumerate() {
        for (j, cell) in line.split(',').enumerate() {
            let v: u64 = cell.parse().unwrap();
            total += v;
            if i == j {
                diag += v;
            }
        }
    }
    assert_eq!(total, 24, "confusion total = test set size");
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((acc - diag as f64 / total as f64).abs() < 1e-12);
    assert!(report["separation"]["separation_gap"].is_number());
    assert_eq!(report["n_samples"].as_u64().unwrap(), 24);

    // Embedding CSVs: one row per test image, projection has x,y,label.
    let emb = std::fs::read_to_string(d.join("emb.csv")).unwrap();
    assert_eq!(emb.lines().count(), 25);
    assert!(emb.lines().next().unwrap().starts_with("label,e0,"));
    let proj = std::fs::read_to_string(d.join("proj.csv")).unwrap();
    assert_eq!(proj.lines().next().unwrap(), "x,y,label");
    assert_eq!(proj.lines().count(), 25);
}

#[test]
fn missing_data_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = scl(
        dir.path(),
        &[
            "train", "--data", "nope.ds", "--out", "m.ckpt", "--log", "l.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn invalid_usage_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = scl(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = scl(dir.path(), &["gen-data"]); // missing required --out
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_exits_1_without_creating_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &gen_args("train.ds", "0", "8"));
    std::fs::write(d.join("bad.json"), r#"{"train": {"learning_rate": -1.0}}"#).unwrap();
    let out = scl(
        d,
        &[
            "train", "--data", "train.ds", "--config", "bad.json", "--out", "m.ckpt",
            "--log", "l.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!d.join("m.ckpt").exists());
    assert!(!d.join("l.csv").exists());

    std::fs::write(d.join("unknown.json"), r#"{"training": {}}"#).unwrap();
    let out = scl(
        d,
        &[
            "train", "--data", "train.ds", "--config", "unknown.json", "--out", "m.ckpt",
            "--log", "l.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "unknown config keys are rejected");
}

#[test]
fn truncated_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &gen_args("train.ds", "0", "8"));
    let bytes = std::fs::read(d.join("train.ds")).unwrap();
    std::fs::write(d.join("cut.ds"), &bytes[..bytes.len() - 64]).unwrap();
    let out = scl(
        d,
        &["train", "--data", "cut.ds", "--out", "m.ckpt", "--log", "l.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_row_count_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &gen_args("train.ds", "0", "8"));
    ok(d, &gen_args("test.ds", "1", "6"));
    std::fs::write(d.join("cfg.json"), r#"{"train": {"iterations": 25}}"#).unwrap();
    ok(
        d,
        &[
            "ablate", "--data", "train.ds", "--test-data", "test.ds", "--config", "cfg.json",
            "--seeds", "1", "--out", "ablation.csv",
        ],
    );
    let csv = std::fs::read_to_string(d.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "header + 2 runs + summary:\n{csv}");
    assert_eq!(
        lines[0],
        "seed,scl,accuracy,macro_recall,macro_auc,separation_gap"
    );
    assert!(lines[1].starts_with("0,true,"));
    assert!(lines[2].starts_with("0,false,"));
    assert!(lines[3].starts_with("mean_diff,,"));
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &gen_args("a.ds", "0", "8"));
    ok(d, &gen_args("b.ds", "0", "8"));
    assert_eq!(
        std::fs::read(d.join("a.ds")).unwrap(),
        std::fs::read(d.join("b.ds")).unwrap()
    );
    for tag in ["x", "y"] {
        ok(
            d,
            &[
                "train",
                "--data",
                "a.ds",
                "--out",
                &format!("{tag}.ckpt"),
                "--log",
                &format!("{tag}.csv"),
                "--iterations",
                "30",
            ],
        );
    }
    assert_eq!(
        std::fs::read(d.join("x.ckpt")).unwrap(),
        std::fs::read(d.join("y.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("x.csv")).unwrap(),
        std::fs::read(d.join("y.csv")).unwrap()
    );
}
