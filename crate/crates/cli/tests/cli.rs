//! End-to-end runs of the `temppnet` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_temppnet"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("temppnet-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 24-patient corpus plus a settings file for quick training.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    ok(&["generate", "--out", s(&dir.join("gen")), "--patients", "24", "--seed", "5"]);
    let config = dir.join("quick.json");
    std::fs::write(&config, r#"{"epochs": 2, "batch_size": 8, "num_symptoms": 3, "trends_per_class": 2, "time_dim": 4}"#).unwrap();
    (dir.join("gen/corpus.jsonl"), config)
}

#[test]
fn metrics_only_evaluation_prices_the_published_operating_point() {
    let dir = scratch("econ");
    let out = ok(&["evaluate", "--precision", "0.737", "--recall", "0.796", "--out", s(&dir)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let net = report["economics"]["net"].as_f64().unwrap();
    assert!((net - 95.410).abs() <= 0.01, "{net}");
    assert_eq!(json(&dir.join("evaluation.json")), report);
    assert_eq!(json(&dir.join("config.json"))["precision"], 0.737);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = scratch("errors");
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--out", s(&dir)]).status.code(), Some(1));
    assert_eq!(run(&["evaluate", "--precision", "0.5", "--out", s(&dir)]).status.code(), Some(1));
    assert_eq!(run(&["evaluate", "--precision", "1.5", "--recall", "0.5", "--out", s(&dir)]).status.code(), Some(2));
    let missing = run(&["interpret", "--patient", "P3", "--data", "nowhere.jsonl", "--out", s(&dir)]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--checkpoint"));
    assert_eq!(run(&["extract-features", "--data", s(&dir.join("absent.jsonl")), "--out", s(&dir)]).status.code(), Some(2));
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"epochs": 1, "unknown_key": 3}"#).unwrap();
    assert_eq!(run(&["--config", s(&bad), "train", "--out", s(&dir)]).status.code(), Some(2));
}

#[test]
fn generated_corpora_are_reproducible() {
    let dir = scratch("generate");
    for name in ["a", "b"] {
        ok(&["generate", "--out", s(&dir.join(name)), "--patients", "10", "--balance", "0.3", "--seed", "9"]);
    }
    let read = |n: &str| std::fs::read(dir.join(n).join("corpus.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    let manifest = json(&dir.join("a/corpus.manifest.json"));
    assert_eq!(manifest["depressed"], 3);
}

#[test]
fn features_have_one_row_per_test() {
    let dir = scratch("features");
    let (corpus, _) = setup(&dir);
    ok(&["extract-features", "--data", s(&corpus), "--out", s(&dir.join("f"))]);
    let text = std::fs::read_to_string(dir.join("f/features.csv")).unwrap();
    let tests = std::fs::read_to_string(&corpus).unwrap().lines().count();
    assert_eq!(text.lines().count(), tests + 1);
    assert!(text.starts_with("patient_id,t_days,"));
}

#[test]
fn training_is_reproducible_and_feeds_evaluate_and_interpret() {
    let dir = scratch("train");
    let (corpus, config) = setup(&dir);
    let train = |name: &str| {
        ok(&["--config", s(&config), "train", "--data", s(&corpus), "--seed", "7", "--out", s(&dir.join(name))]);
        std::fs::read(dir.join(name).join("model.ckpt")).unwrap()
    };
    let first = train("run1");
    assert_eq!(first, train("run2"));

    // The resolved settings alone repeat the run.
    ok(&["--config", s(&dir.join("run1/config.json")), "train", "--out", s(&dir.join("run3"))]);
    assert_eq!(first, std::fs::read(dir.join("run3/model.ckpt")).unwrap());

    let history = json(&dir.join("run1/history.json"));
    assert_eq!(history["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(history["checkpoint_sha256"].as_str().unwrap().len(), 64);

    let ckpt = dir.join("run1/model.ckpt");
    let out = ok(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--out", s(&dir.join("eval"))]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["predictions"].as_array().unwrap().len(), 24);
    let f1 = report["metrics"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let idir = dir.join("interp");
    ok(&["interpret", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--patient", "P003", "--out", s(&idir)]);
    let r = json(&idir.join("report.json"));
    assert_eq!(r["patient_id"], "P003");
    let p = report["predictions"].as_array().unwrap().iter().find(|p| p["patient_id"] == "P003").unwrap();
    assert_eq!(r["probability"], p["probability"]);
    assert!(idir.join("config.json").exists());
    let unknown = run(&["interpret", "--checkpoint", s(&ckpt), "--data", s(&corpus), "--patient", "P999", "--out", s(&idir)]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn sweep_writes_three_tables_and_notes_skipped_settings() {
    let dir = scratch("sweep");
    let (corpus, _) = setup(&dir);
    let config = dir.join("sweep.json");
    std::fs::write(
        &config,
        r#"{"epochs": 1, "batch_size": 8, "num_symptoms": 2, "trends_per_class": 1, "time_dim": 2, "runs": 1, "windows_weeks": [1, 4], "rates_hz": [5, 20]}"#,
    )
    .unwrap();
    let out = dir.join("out");
    ok(&["--config", s(&config), "sweep", "--data", s(&corpus), "--out", s(&out)]);
    let rows = |name: &str| std::fs::read_to_string(out.join(name)).unwrap().lines().count() - 1;
    assert_eq!(rows("ablation.csv"), 4);
    assert_eq!(rows("window.csv"), 1);
    assert_eq!(rows("rate.csv"), 1);
    let notes = std::fs::read_to_string(out.join("notes.txt")).unwrap();
    assert!(notes.contains("window-4w") && notes.contains("rate-20hz"));
}
