use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "sizes": {"n_seed": 20, "n_pool": 30, "n_test": 15},
  "hidden_dim": 2,
  "train": {"epochs": 4},
  "strategies": [{"kind": "random"}, {"kind": "entropy"}, {"kind": "pctc"}, {"kind": "egl", "k": 5}],
  "query_fractions": [0.2, 0.5],
  "fisher": {"n": 40, "replicates": 30}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egl-lab"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    dir
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--config", "nope.json", "--seed", "1", "--n", "3", "--out", "d.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!dir.path().join("d.jsonl").exists());

    let out = run(dir.path(), &["gen-data", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), r#"{"query_fractions": [0.5, 0.2]}"#).unwrap();
    let out = run(dir.path(), &["al-run", "--config", "cfg.json", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_one_line_per_utterance() {
    let dir = setup();
    ok(dir.path(), &["gen-data", "--config", "cfg.json", "--seed", "3", "--n", "17", "--out", "d.jsonl"]);
    let text = fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 17);
}

#[test]
fn pipeline_subcommands_compose() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["gen-data", "--config", "cfg.json", "--seed", "1", "--n", "30", "--out", "train.jsonl"]);
    ok(d, &["gen-data", "--config", "cfg.json", "--seed", "2", "--n", "12", "--out", "pool.jsonl"]);
    ok(d, &["train", "--config", "cfg.json", "--seed", "1", "--data", "train.jsonl", "--out", "m.json"]);
    ok(d, &["train", "--config", "cfg.json", "--seed", "1", "--data", "train.jsonl", "--init", "m.json", "--out", "m2.json"]);
    ok(d, &["score", "--config", "cfg.json", "--seed", "1", "--checkpoint", "m.json", "--data", "pool.jsonl", "--strategy", "egl", "--out", "s.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("s.jsonl")).unwrap().lines().count(), 12);
    ok(d, &["select", "--config", "cfg.json", "--scores", "s.jsonl", "--fraction", "0.25", "--out", "ids.txt"]);
    assert_eq!(fs::read_to_string(d.join("ids.txt")).unwrap().lines().count(), 3);
    ok(d, &["eval", "--config", "cfg.json", "--checkpoint", "m.json", "--data", "pool.jsonl", "--out", "e.json", "--transcripts", "t.jsonl"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("e.json")).unwrap()).unwrap();
    assert!(report["cer"].as_f64().unwrap() >= 0.0);
    assert_eq!(fs::read_to_string(d.join("t.jsonl")).unwrap().lines().count(), 12);

    let out = run(d, &["score", "--config", "cfg.json", "--seed", "1", "--checkpoint", "m.json", "--data", "pool.jsonl", "--strategy", "bogus", "--out", "x.jsonl"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn al_run_and_rank_compare_write_their_artifacts() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["al-run", "--config", "cfg.json", "--seed", "4", "--out", "run"]);
    for f in ["results.csv", "aggregate.csv", "table.txt", "config.json", "seed-4/pool.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(d.join("run/results.csv")).unwrap().lines().count(), 1 + 4 * 2);
    ok(d, &["rank-compare", "--config", "cfg.json", "--seed", "4", "--strategy-a", "egl", "--out", "rc"]);
    for f in ["agreement.json", "scatter.csv", "scatter.svg", "probe.csv"] {
        assert!(d.join("rc").join(f).exists(), "{f}");
    }
    ok(d, &["rank-compare", "--config", "cfg.json", "--seed", "4", "--strategy-a", "entropy", "--out", "self"]);
    let agreement: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("self/agreement.json")).unwrap()).unwrap();
    assert_eq!(agreement["spearman_rho"].as_f64(), Some(1.0));
}

#[test]
fn fisher_check_reports_the_inverse_fisher() {
    let dir = setup();
    ok(dir.path(), &["fisher-check", "--config", "cfg.json", "--seed", "2", "--out", "f.json"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    assert_eq!(report["inverse_fisher"][0][0].as_f64(), Some(4.0));
}
