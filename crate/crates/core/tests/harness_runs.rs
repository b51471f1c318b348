use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use egl_lab::dataio::GenConfig;
use egl_lab::harness::{run_experiment, ExperimentConfig, Sizes};
use egl_lab::{StrategyConfig, StrategyKind, TrainConfig};

fn small_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        gen: GenConfig::default(),
        sizes: Sizes {
            n_seed: 20,
            n_pool: 30,
            n_test: 15,
        },
        hidden_dim: 2,
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
        strategies: [StrategyKind::Random, StrategyKind::Entropy, StrategyKind::Pctc, StrategyKind::Egl]
            .into_iter()
            .map(|k| StrategyConfig {
                k: 5,
                ..StrategyConfig::of(k)
            })
            .collect(),
        query_fractions: vec![0.1, 0.5],
        seeds: vec![1],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_fraction_gives_identical_results_across_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.query_fractions = vec![1.0];
    cfg.seeds = vec![3, 4];
    let outcome = run_experiment(&cfg).unwrap();
    for seed in [3, 4] {
        let rows: Vec<_> = outcome.table.rows.iter().filter(|r| r.seed == seed).collect();
        assert_eq!(rows.len(), 4);
        assert!(rows.windows(2).all(|w| w[0].metrics == w[1].metrics));
    }
}

#[test]
fn repeated_run_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    run_experiment(&cfg).unwrap();
    let first = read_tree(dir.path());
    fs::remove_dir_all(dir.path()).unwrap();
    run_experiment(&cfg).unwrap();
    let second = read_tree(dir.path());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(v == &second[k], "{k} differs");
    }
    for name in ["results.csv", "aggregate.csv", "log.txt", "seed-1/scores/egl.jsonl", "seed-1/rank/egl-vs-entropy/scatter.svg"] {
        assert!(first.contains_key(name), "missing {name}");
    }
}

#[test]
fn grid_is_complete_and_budgets_match() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.strategies = vec![StrategyConfig::of(StrategyKind::Random)];
    cfg.seeds = vec![1, 2];
    let outcome = run_experiment(&cfg).unwrap();
    let t = &outcome.table;
    assert_eq!(t.rows.len(), 4);
    assert_eq!(t.failed_cells(), 0);
    for f in [0.1, 0.5] {
        let cers: Vec<f64> = t.rows.iter().filter(|r| r.fraction == f).map(|r| r.metrics.as_ref().unwrap().cer).collect();
        let agg = t.aggregate("random", f).unwrap();
        assert_eq!(agg.n_seeds, 2);
        let (lo, hi) = (cers[0].min(cers[1]), cers[0].max(cers[1]));
        assert!(agg.cer.0 >= lo && agg.cer.0 <= hi);
    }
    for (f, tag, expect) in [(0.1, "f010", 3), (0.5, "f050", 15)] {
        let cell: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("seed-2/cells/random-{tag}/cell.json"))).unwrap()).unwrap();
        assert_eq!(cell["n_train"], 20 + expect, "fraction {f}");
        assert_eq!(cell["budget"]["total"], expect);
        assert_eq!(cell["budget"]["queried_ids"].as_array().unwrap().len(), expect);
    }
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "strategy,fraction,seed,mean_ctc,cer,wer");
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(fs::read_to_string(dir.path().join("log.txt")).unwrap().lines().count(), 2 + 4);
}

#[test]
fn failed_base_training_marks_every_cell_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.train.learning_rate = 1e300;
    cfg.train.clip_norm = None;
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.table.failed_cells(), outcome.table.rows.len());
    assert_eq!(outcome.table.rows.len(), 8);
    let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with("failed,failed,failed")));
}
