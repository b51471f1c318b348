//! End-to-end active-learning runs: base model, pool scoring, batch
//! selection at each query fraction, warm-started retraining, evaluation,
//! and rank comparisons between strategies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::dataio::{BudgetLedger, DatasetSplit, GenConfig, LabelOracle};
use crate::error::{Error, Result};
use crate::fisher::{asymptotic_check, bernoulli_toy, AsymptoticReport, AsymptoticSpec, PoolDesign};
use crate::metrics::{evaluate, rank_agreement, write_scatter_csv, EvalReport, RankAgreement};
use crate::seqmodel::{save_checkpoint, train, ModelParams, Shape, TrainConfig, Utterance};
use crate::strategies::{score_pool, select_batch, write_score_dump, ScoreRecord, StrategyConfig, StrategyKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sizes {
    pub n_seed: usize,
    pub n_pool: usize,
    pub n_test: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            n_seed: 200,
            n_pool: 2000,
            n_test: 500,
        }
    }
}

/// Settings for the Bernoulli-toy asymptotic check run by `fisher-check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FisherCheckConfig {
    pub theta: f64,
    /// Scalar feature of each candidate; one candidate per entry.
    pub features: Vec<f64>,
    /// Design weights over `features`; uniform when absent.
    pub design: Option<Vec<f64>>,
    pub n: usize,
    pub replicates: usize,
}

impl Default for FisherCheckConfig {
    fn default() -> Self {
        Self {
            theta: 0.0,
            features: vec![1.0],
            design: None,
            n: 500,
            replicates: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    pub sizes: Sizes,
    /// Recurrent width; 0 selects the linear frame classifier.
    pub hidden_dim: usize,
    pub train: TrainConfig,
    pub strategies: Vec<StrategyConfig>,
    pub query_fractions: Vec<f64>,
    /// Replicate seeds.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Beam width of the evaluation decoder.
    pub eval_beam_width: usize,
    pub fisher: FisherCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            sizes: Sizes::default(),
            hidden_dim: 0,
            train: TrainConfig::default(),
            strategies: [
                StrategyKind::Random,
                StrategyKind::Entropy,
                StrategyKind::Pctc,
                StrategyKind::Egl,
            ]
            .into_iter()
            .map(StrategyConfig::of)
            .collect(),
            query_fractions: vec![0.1, 0.2, 0.3, 0.4],
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("al-run"),
            eval_beam_width: 32,
            fisher: FisherCheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.gen.feature_dim, self.hidden_dim, self.gen.alphabet.len())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy required".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        let mut tags: Vec<String> = self.strategies.iter().map(StrategyConfig::tag).collect();
        tags.sort();
        tags.dedup();
        if tags.len() != self.strategies.len() {
            return Err(Error::Config("strategy tags must be unique".into()));
        }
        if self.query_fractions.is_empty() {
            return Err(Error::Config("at least one query fraction required".into()));
        }
        if self.query_fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("query fractions must lie in (0, 1]".into()));
        }
        if self.query_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("query fractions must be strictly ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.sizes.n_seed == 0 || self.sizes.n_pool == 0 || self.sizes.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        if self.eval_beam_width == 0 {
            return Err(Error::Config("eval_beam_width must be positive".into()));
        }
        Ok(())
    }
}

/// Independent sub-seed for one purpose of one replicate.
pub fn derive_seed(replicate: u64, purpose: u64) -> u64 {
    let mut z = replicate
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(purpose.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const PURPOSE_DATA: u64 = 1;
const PURPOSE_INIT: u64 = 2;
const PURPOSE_TRAIN: u64 = 3;
const PURPOSE_RANDOM: u64 = 4;

/// Everything a replicate needs before querying: data and the base model.
#[derive(Clone, Debug)]
pub struct Replicate {
    pub seed: u64,
    pub split: DatasetSplit,
    pub base: ModelParams<f64>,
    pub base_report: EvalReport,
    pub train: TrainConfig,
}

impl Replicate {
    pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let gen = GenConfig {
            seed: derive_seed(seed, PURPOSE_DATA) ^ config.gen.seed,
            ..config.gen.clone()
        };
        let split = DatasetSplit::generate(&gen, config.sizes.n_seed, config.sizes.n_pool, config.sizes.n_test)?;
        let init = ModelParams::init_uniform(config.shape(), derive_seed(seed, PURPOSE_INIT));
        let train_cfg = TrainConfig {
            seed: derive_seed(seed, PURPOSE_TRAIN) ^ config.train.seed,
            ..config.train.clone()
        };
        let base = train(&init, &split.labeled_seed, &train_cfg)?.params;
        let base_report = evaluate(&base, &split.test, &config.gen.alphabet, config.eval_beam_width)?;
        Ok(Self {
            seed,
            split,
            base,
            base_report,
            train: train_cfg,
        })
    }

    /// Strategy config with the replicate folded into the random seed.
    pub fn strategy(&self, cfg: &StrategyConfig) -> StrategyConfig {
        let mut cfg = cfg.clone();
        if cfg.kind == StrategyKind::Random {
            cfg.seed ^= derive_seed(self.seed, PURPOSE_RANDOM);
        }
        cfg
    }

    pub fn score(&self, cfg: &StrategyConfig) -> Result<Vec<ScoreRecord>> {
        score_pool(&self.base, &self.split.unlabeled_pool, &self.strategy(cfg))
    }

    /// Selects, labels and retrains from the base model, then evaluates.
    pub fn run_cell(
        &self,
        config: &ExperimentConfig,
        records: &[ScoreRecord],
        fraction: f64,
    ) -> Result<CellOutcome> {
        let ids = select_batch(records, fraction)?;
        let mut oracle = self.split.oracle.fresh();
        let labeled = oracle.query(&ids)?;
        let mut data: Vec<Utterance<f64>> = self.split.labeled_seed.clone();
        data.extend(labeled.into_iter().map(|(mut u, y)| {
            u.reference = Some(y);
            u
        }));
        data.sort_by(|a, b| a.id.cmp(&b.id));
        let trained = train(&self.base, &data, &self.train)?;
        let report = evaluate(&trained.params, &self.split.test, &config.gen.alphabet, config.eval_beam_width)?;
        Ok(CellOutcome {
            n_train: data.len(),
            epochs: trained.epoch_losses.len(),
            final_train_loss: trained.epoch_losses.last().copied(),
            report,
            budget: oracle.ledger(),
            selected_silence: ids
                .iter()
                .filter(|id| self.split.oracle.is_silence(id) == Some(true))
                .count(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub n_train: usize,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub report: EvalReport,
    pub budget: BudgetLedger,
    pub selected_silence: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: String,
    pub fraction: f64,
    pub seed: u64,
    /// `None` marks a failed cell.
    pub metrics: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub fraction: f64,
    pub n_seeds: usize,
    pub mean_ctc: (f64, f64),
    pub cer: (f64, f64),
    pub wer: (f64, f64),
}

/// Per-(strategy, fraction, seed) metrics plus mean/stddev over seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl ResultsTable {
    /// Rows sorted by (strategy order, fraction, seed), aggregates recomputed.
    pub fn assemble(mut rows: Vec<ResultRow>, strategy_order: &[String]) -> Self {
        let pos = |s: &str| strategy_order.iter().position(|t| t == s).unwrap_or(usize::MAX);
        rows.sort_by(|a, b| {
            pos(&a.strategy)
                .cmp(&pos(&b.strategy))
                .then(a.fraction.total_cmp(&b.fraction))
                .then(a.seed.cmp(&b.seed))
        });
        let mut groups: Vec<((String, f64), Vec<&EvalReport>)> = Vec::new();
        for row in &rows {
            let key = (row.strategy.clone(), row.fraction);
            if groups.last().map(|g| &g.0) != Some(&key) {
                groups.push((key, Vec::new()));
            }
            if let Some(m) = &row.metrics {
                groups.last_mut().unwrap().1.push(m);
            }
        }
        let aggregates = groups
            .into_iter()
            .filter(|(_, ms)| !ms.is_empty())
            .map(|((strategy, fraction), ms)| {
                let col = |f: fn(&EvalReport) -> f64| mean_std(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
                AggregateRow {
                    strategy,
                    fraction,
                    n_seeds: ms.len(),
                    mean_ctc: col(|m| m.mean_ctc),
                    cer: col(|m| m.cer),
                    wer: col(|m| m.wer),
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn aggregate(&self, strategy: &str, fraction: f64) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.strategy == strategy && (a.fraction - fraction).abs() < 1e-12)
    }

    pub fn failed_cells(&self) -> usize {
        self.rows.iter().filter(|r| r.metrics.is_none()).count()
    }

    pub fn results_csv(&self) -> String {
        let mut s = String::from("strategy,fraction,seed,mean_ctc,cer,wer\n");
        for r in &self.rows {
            match &r.metrics {
                Some(m) => writeln!(s, "{},{},{},{},{},{}", r.strategy, r.fraction, r.seed, m.mean_ctc, m.cer, m.wer),
                None => writeln!(s, "{},{},{},failed,failed,failed", r.strategy, r.fraction, r.seed),
            }
            .expect("write to string");
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from(
            "strategy,fraction,n_seeds,mean_ctc_mean,mean_ctc_std,cer_mean,cer_std,wer_mean,wer_std\n",
        );
        for a in &self.aggregates {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                a.strategy, a.fraction, a.n_seeds, a.mean_ctc.0, a.mean_ctc.1, a.cer.0, a.cer.1, a.wer.0, a.wer.1
            )
            .expect("write to string");
        }
        s
    }

    /// Text table in the layout of the usual CTC / CER / WER by query-percentage report.
    pub fn render(&self, strategy_order: &[String], fractions: &[f64]) -> String {
        let mut s = String::new();
        for (name, pick) in [
            ("CTC", (|a: &AggregateRow| a.mean_ctc) as fn(&AggregateRow) -> (f64, f64)),
            ("CER", |a: &AggregateRow| a.cer),
            ("WER", |a: &AggregateRow| a.wer),
        ] {
            write!(s, "{name:<6}").unwrap();
            for t in strategy_order {
                write!(s, " {t:>18}").unwrap();
            }
            s.push('\n');
            for &f in fractions {
                write!(s, "{:>5.0}%", f * 100.0).unwrap();
                for t in strategy_order {
                    match self.aggregate(t, f) {
                        Some(a) => {
                            let (m, sd) = pick(a);
                            write!(s, " {:>10.4} ±{:>6.4}", m, sd).unwrap();
                        }
                        None => write!(s, " {:>18}", "failed").unwrap(),
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStat {
    pub seed: u64,
    pub strategy_a: String,
    pub strategy_b: String,
    pub spearman_rho: f64,
    pub kendall_tau: f64,
}

/// Utterances ranked informative by one strategy and uninformative by another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub id: String,
    pub normalized_rank_a: f64,
    pub normalized_rank_b: f64,
    pub reference_len: usize,
    pub silence: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilenceProbe {
    pub seed: u64,
    /// All utterances in the top `a` region and bottom `b` region.
    pub entries: Vec<ProbeEntry>,
    pub silence_fraction: f64,
    pub pool_base_rate: f64,
}

/// Pool items with `normalized_rank_a >= a_min` and `normalized_rank_b <= b_max`,
/// ordered by descending rank under `a`.
pub fn silence_probe(
    seed: u64,
    a: &[ScoreRecord],
    b: &[ScoreRecord],
    oracle: &LabelOracle,
    a_min: f64,
    b_max: f64,
) -> SilenceProbe {
    let b_rank: BTreeMap<&str, f64> = b.iter().map(|r| (r.id.as_str(), r.normalized_rank)).collect();
    let mut entries: Vec<ProbeEntry> = a
        .iter()
        .filter(|r| r.normalized_rank >= a_min)
        .filter_map(|r| {
            let nb = *b_rank.get(r.id.as_str())?;
            (nb <= b_max).then(|| ProbeEntry {
                id: r.id.clone(),
                normalized_rank_a: r.normalized_rank,
                normalized_rank_b: nb,
                reference_len: oracle.reference(&r.id).map_or(0, |y| y.len()),
                silence: oracle.is_silence(&r.id).unwrap_or(false),
            })
        })
        .collect();
    entries.sort_by(|x, y| y.normalized_rank_a.total_cmp(&x.normalized_rank_a).then(x.id.cmp(&y.id)));
    let silent = entries.iter().filter(|e| e.silence).count();
    let pool_silent = a.iter().filter(|r| oracle.is_silence(&r.id) == Some(true)).count();
    SilenceProbe {
        seed,
        silence_fraction: if entries.is_empty() {
            0.0
        } else {
            silent as f64 / entries.len() as f64
        },
        pool_base_rate: pool_silent as f64 / a.len().max(1) as f64,
        entries,
    }
}

/// Self-contained 640x640 SVG scatter of normalized ranks with the diagonal.
pub fn scatter_svg(scatter: &[(f64, f64)], label_a: &str, label_b: &str) -> String {
    const SIZE: f64 = 640.0;
    const MARGIN: f64 = 40.0;
    let span = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + v * span;
    let py = |v: f64| SIZE - MARGIN - v * span;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="640" viewBox="0 0 640 640">"#
    )
    .unwrap();
    writeln!(s, r#"<rect x="0" y="0" width="640" height="640" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{m}" y="{m}" width="{w}" height="{w}" fill="none" stroke="black" stroke-width="1"/>"#,
        m = MARGIN,
        w = span
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-width="1" stroke-dasharray="6,4"/>"#,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    )
    .unwrap();
    for &(a, b) in scatter {
        writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue" fill-opacity="0.6"/>"#, px(a), py(b)).unwrap();
    }
    writeln!(
        s,
        r#"<text x="320" y="630" text-anchor="middle" font-family="sans-serif" font-size="14">{} rank</text>"#,
        xml_escape(label_a)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="320" text-anchor="middle" font-family="sans-serif" font-size="14" transform="rotate(-90 14 320)">{} rank</text>"#,
        xml_escape(label_b)
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankCompareSummary {
    pub strategy_a: String,
    pub strategy_b: String,
    pub n: usize,
    pub spearman_rho: f64,
    pub kendall_tau: f64,
}

/// Writes agreement JSON, scatter CSV and scatter SVG for two scorings.
pub fn write_rank_compare(
    dir: impl AsRef<Path>,
    a: &[ScoreRecord],
    b: &[ScoreRecord],
    tag_a: &str,
    tag_b: &str,
) -> Result<RankAgreement> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let agreement = rank_agreement(a, b)?;
    write_scatter_csv(dir.join("scatter.csv"), &agreement.scatter)?;
    fs::write(dir.join("scatter.svg"), scatter_svg(&agreement.scatter, tag_a, tag_b))?;
    let summary = RankCompareSummary {
        strategy_a: tag_a.into(),
        strategy_b: tag_b.into(),
        n: agreement.scatter.len(),
        spearman_rho: agreement.spearman_rho,
        kendall_tau: agreement.kendall_tau,
    };
    fs::write(dir.join("agreement.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(agreement)
}

pub fn probe_csv(probe: &SilenceProbe) -> String {
    let mut s = String::from("id,normalized_rank_a,normalized_rank_b,reference_len,silence\n");
    for e in &probe.entries {
        writeln!(s, "{},{},{},{},{}", e.id, e.normalized_rank_a, e.normalized_rank_b, e.reference_len, e.silence).unwrap();
    }
    s
}

/// Rank comparison of two strategies on a replicate's pool under its base
/// model, with artifacts written to `dir`.
pub fn rank_compare(
    replicate: &Replicate,
    strategy_a: &StrategyConfig,
    strategy_b: &StrategyConfig,
    dir: impl AsRef<Path>,
) -> Result<(RankAgreement, SilenceProbe)> {
    let a = replicate.score(strategy_a)?;
    let b = replicate.score(strategy_b)?;
    let dir = dir.as_ref();
    let agreement = write_rank_compare(dir, &a, &b, &strategy_a.tag(), &strategy_b.tag())?;
    let probe = silence_probe(replicate.seed, &a, &b, &replicate.split.oracle, 0.9, 0.25);
    fs::write(dir.join("probe.csv"), probe_csv(&probe))?;
    Ok((agreement, probe))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub table: ResultsTable,
    pub base_reports: Vec<(u64, EvalReport)>,
    /// pCTC-vs-entropy and EGL-vs-entropy agreement per seed, when those
    /// strategies are configured.
    pub rank_stats: Vec<RankStat>,
    /// EGL top decile intersected with entropy bottom quartile, per seed.
    pub silence_probes: Vec<SilenceProbe>,
}

/// `id,frames,reference_len,silence` for every pool utterance.
pub fn pool_manifest(replicate: &Replicate) -> String {
    let mut s = String::from("id,frames,reference_len,silence\n");
    let oracle = &replicate.split.oracle;
    for u in &replicate.split.unlabeled_pool {
        writeln!(
            s,
            "{},{},{},{}",
            u.id,
            u.frames(),
            oracle.reference(&u.id).map_or(0, |y| y.len()),
            oracle.is_silence(&u.id).unwrap_or(false)
        )
        .unwrap();
    }
    s
}

fn fraction_tag(f: f64) -> String {
    format!("f{:03}", (f * 100.0).round() as i64)
}

/// Runs the full (strategy x fraction x seed) grid and writes all artifacts
/// under `config.output_dir`. Failed cells are recorded and skipped.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;

    let order: Vec<String> = config.strategies.iter().map(StrategyConfig::tag).collect();
    let mut rows = Vec::new();
    let mut log = String::new();
    let mut base_reports = Vec::new();
    let mut rank_stats = Vec::new();
    let mut silence_probes = Vec::new();

    for &seed in &config.seeds {
        let seed_dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(seed_dir.join("scores"))?;
        let replicate = match Replicate::prepare(config, seed) {
            Ok(r) => r,
            Err(e) => {
                writeln!(log, "seed={seed} base FAILED: {e}").unwrap();
                for tag in &order {
                    for &fraction in &config.query_fractions {
                        rows.push(ResultRow {
                            strategy: tag.clone(),
                            fraction,
                            seed,
                            metrics: None,
                            error: Some(format!("base model failed: {e}")),
                        });
                    }
                }
                continue;
            }
        };
        save_checkpoint(seed_dir.join("base.json"), &replicate.base)?;
        fs::write(
            seed_dir.join("base_eval.json"),
            serde_json::to_string_pretty(&replicate.base_report)? + "\n",
        )?;
        fs::write(seed_dir.join("pool.csv"), pool_manifest(&replicate))?;
        base_reports.push((seed, replicate.base_report.clone()));
        writeln!(
            log,
            "seed={seed} base cer={} wer={} mean_ctc={}",
            replicate.base_report.cer, replicate.base_report.wer, replicate.base_report.mean_ctc
        )
        .unwrap();

        let mut scored: BTreeMap<String, Vec<ScoreRecord>> = BTreeMap::new();
        for strat in &config.strategies {
            let tag = strat.tag();
            let records = match replicate.score(strat) {
                Ok(r) => r,
                Err(e) => {
                    for &fraction in &config.query_fractions {
                        rows.push(ResultRow {
                            strategy: tag.clone(),
                            fraction,
                            seed,
                            metrics: None,
                            error: Some(format!("scoring failed: {e}")),
                        });
                        writeln!(log, "seed={seed} strategy={tag} fraction={fraction} FAILED scoring: {e}").unwrap();
                    }
                    continue;
                }
            };
            write_score_dump(seed_dir.join("scores").join(format!("{tag}.jsonl")), &records)?;

            for &fraction in &config.query_fractions {
                let cell_dir = seed_dir.join("cells").join(format!("{tag}-{}", fraction_tag(fraction)));
                fs::create_dir_all(&cell_dir)?;
                match replicate.run_cell(config, &records, fraction) {
                    Ok(cell) => {
                        fs::write(cell_dir.join("cell.json"), serde_json::to_string_pretty(&cell)? + "\n")?;
                        fs::write(cell_dir.join("budget.json"), serde_json::to_string_pretty(&cell.budget)? + "\n")?;
                        writeln!(
                            log,
                            "seed={seed} strategy={tag} fraction={fraction} n_train={} epochs={} cer={} wer={} mean_ctc={}",
                            cell.n_train, cell.epochs, cell.report.cer, cell.report.wer, cell.report.mean_ctc
                        )
                        .unwrap();
                        info!("seed {seed} {tag} {fraction}: cer {:.4}", cell.report.cer);
                        rows.push(ResultRow {
                            strategy: tag.clone(),
                            fraction,
                            seed,
                            metrics: Some(cell.report),
                            error: None,
                        });
                    }
                    Err(e) => {
                        writeln!(log, "seed={seed} strategy={tag} fraction={fraction} FAILED: {e}").unwrap();
                        rows.push(ResultRow {
                            strategy: tag.clone(),
                            fraction,
                            seed,
                            metrics: None,
                            error: Some(e.to_string()),
                        });
                    }
                }
            }
            scored.insert(tag, records);
        }

        let find = |kind: StrategyKind, squared: bool| {
            config
                .strategies
                .iter()
                .find(|s| s.kind == kind && (kind != StrategyKind::Egl || s.squared == squared))
                .map(StrategyConfig::tag)
                .and_then(|t| scored.get(&t).map(|r| (t, r)))
        };
        if let Some((ent_tag, ent)) = find(StrategyKind::Entropy, true) {
            for kind in [StrategyKind::Pctc, StrategyKind::Egl] {
                if let Some((tag, recs)) = find(kind, true) {
                    let dir = seed_dir.join("rank").join(format!("{tag}-vs-{ent_tag}"));
                    let agreement = write_rank_compare(&dir, recs, ent, &tag, &ent_tag)?;
                    rank_stats.push(RankStat {
                        seed,
                        strategy_a: tag.clone(),
                        strategy_b: ent_tag.clone(),
                        spearman_rho: agreement.spearman_rho,
                        kendall_tau: agreement.kendall_tau,
                    });
                    if kind == StrategyKind::Egl {
                        let probe = silence_probe(seed, recs, ent, &replicate.split.oracle, 0.9, 0.25);
                        fs::write(dir.join("probe.csv"), probe_csv(&probe))?;
                        silence_probes.push(probe);
                    }
                }
            }
        }
    }

    let table = ResultsTable::assemble(rows, &order);
    fs::write(out.join("results.csv"), table.results_csv())?;
    fs::write(out.join("aggregate.csv"), table.aggregate_csv())?;
    fs::write(out.join("table.txt"), table.render(&order, &config.query_fractions))?;
    let mut rank_csv = String::from("seed,strategy_a,strategy_b,spearman_rho,kendall_tau\n");
    for r in &rank_stats {
        writeln!(rank_csv, "{},{},{},{},{}", r.seed, r.strategy_a, r.strategy_b, r.spearman_rho, r.kendall_tau).unwrap();
    }
    fs::write(out.join("rank_agreement.csv"), rank_csv)?;
    let mut probe_summary = String::from("seed,n_probe,silence_fraction,pool_base_rate\n");
    for p in &silence_probes {
        writeln!(probe_summary, "{},{},{},{}", p.seed, p.entries.len(), p.silence_fraction, p.pool_base_rate).unwrap();
    }
    fs::write(out.join("silence_probe.csv"), probe_summary)?;
    fs::write(out.join("log.txt"), log)?;

    Ok(ExperimentOutcome {
        table,
        base_reports,
        rank_stats,
        silence_probes,
    })
}

/// Asymptotic check on the Bernoulli toy described by `cfg`.
pub fn fisher_check(cfg: &FisherCheckConfig, seed: u64) -> Result<AsymptoticReport> {
    if cfg.features.is_empty() {
        return Err(Error::Config("fisher.features must not be empty".into()));
    }
    let (truth, _, free) = bernoulli_toy(cfg.theta, cfg.features[0], "x0");
    let candidates: Vec<Utterance<f64>> = cfg
        .features
        .iter()
        .enumerate()
        .map(|(i, &x)| bernoulli_toy(cfg.theta, x, &format!("x{i}")).1)
        .collect();
    let design = match &cfg.design {
        Some(w) => PoolDesign::new(w.clone())?,
        None => PoolDesign::uniform(candidates.len()),
    };
    let spec = AsymptoticSpec {
        design,
        n: cfg.n,
        replicates: cfg.replicates,
        seed,
        free: Some(vec![free]),
        probe: None,
    };
    asymptotic_check(&truth, &candidates, &spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.query_fractions = vec![0.4, 0.2];
        assert!(c.validate().is_err());
        c.query_fractions = vec![];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.strategies.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.strategies.push(StrategyConfig::of(StrategyKind::Egl));
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_config_roundtrips_through_json() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
        // partial configs fill in defaults
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds":[9]}"#).unwrap();
        assert_eq!(partial.seeds, vec![9]);
        assert_eq!(partial.sizes, Sizes::default());
    }

    #[test]
    fn aggregate_mean_lies_between_rows() {
        let row = |seed, cer| ResultRow {
            strategy: "random".into(),
            fraction: 0.1,
            seed,
            metrics: Some(EvalReport {
                mean_ctc: cer * 10.0,
                cer,
                wer: cer * 2.0,
                n_utts: 5,
                n_excluded: 0,
            }),
            error: None,
        };
        let t = ResultsTable::assemble(vec![row(2, 0.3), row(1, 0.1)], &["random".into()]);
        assert_eq!(t.rows[0].seed, 1);
        let a = t.aggregate("random", 0.1).unwrap();
        assert_eq!(a.n_seeds, 2);
        assert!((a.cer.0 - 0.2).abs() < 1e-15);
        assert!(t.results_csv().starts_with("strategy,fraction,seed,mean_ctc,cer,wer\n"));
    }

    #[test]
    fn svg_has_fixed_viewport_and_diagonal() {
        let svg = scatter_svg(&[(0.0, 0.0), (1.0, 0.5)], "a", "b<");
        assert!(svg.contains(r#"width="640" height="640""#));
        assert!(svg.contains("stroke-dasharray"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("b&lt; rank"));
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, PURPOSE_DATA), derive_seed(1, PURPOSE_INIT));
        assert_ne!(derive_seed(1, PURPOSE_DATA), derive_seed(2, PURPOSE_DATA));
    }
}
