//! `egl-lab` command line: data generation, training, scoring, selection,
//! evaluation, full active-learning sweeps, rank comparisons and the Fisher
//! asymptotic check.
//!
//! Exit codes: 0 success, 1 runtime or cell failure, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use egl_lab::dataio::{self, load_dataset, save_dataset, GenConfig};
use egl_lab::harness::{self, ExperimentConfig, Replicate};
use egl_lab::metrics::{evaluate, transcribe};
use egl_lab::seqmodel::{load_checkpoint, save_checkpoint};
use egl_lab::strategies::{read_score_dump, score_pool, select_batch, write_score_dump};
use egl_lab::{train, ModelParams, StrategyConfig, StrategyKind, Utterance};

#[derive(Parser)]
#[command(name = "egl-lab", version, about = "Active learning for CTC sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Number of utterances.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a labeled dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        /// Warm start from this checkpoint instead of a random init.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a pool with one strategy and write a JSON-lines score dump.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Strategy kind or the tag of a strategy in the config.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select the top fraction of a score dump; writes one id per line.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-utterance transcripts as JSON lines.
        #[arg(long)]
        transcripts: Option<PathBuf>,
    },
    /// Full strategy x fraction x seed sweep.
    AlRun {
        #[command(flatten)]
        common: Common,
        /// Replicate seeds; overrides the config list.
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        seed: Vec<u64>,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank agreement, scatter CSV/SVG and silence probe for two strategies.
    RankCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "pctc")]
        strategy_a: String,
        #[arg(long, default_value = "entropy")]
        strategy_b: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo check of the asymptotic variance on the Bernoulli toy.
    FisherCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::load(path)
        .map_err(|e| UsageError(format!("cannot load config {}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
    Ok(config)
}

fn strategy_from(config: &ExperimentConfig, name: &str) -> Result<StrategyConfig> {
    if let Some(s) = config.strategies.iter().find(|s| s.tag() == name) {
        return Ok(s.clone());
    }
    let kind: StrategyKind = name
        .parse()
        .map_err(|_| UsageError(format!("unknown strategy {name:?}")))?;
    Ok(StrategyConfig::of(kind))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path, config: &ExperimentConfig) -> Result<Vec<Utterance<f64>>> {
    load_dataset(path, &config.gen.alphabet).with_context(|| format!("loading {}", path.display()))
}

impl Command {
    /// The single output file, for subcommands that write one.
    fn output_file(&self) -> Option<&Path> {
        match self {
            Command::GenData { out, .. }
            | Command::Train { out, .. }
            | Command::Score { out, .. }
            | Command::Select { out, .. }
            | Command::Eval { out, .. }
            | Command::FisherCheck { out, .. } => Some(out),
            Command::AlRun { .. } | Command::RankCompare { .. } => None,
        }
    }
}

/// Returns the number of failed cells (nonzero only for `al-run`).
fn run(cli: Cli) -> Result<usize> {
    if let Some(parent) = cli.command.output_file().and_then(Path::parent) {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    match cli.command {
        Command::GenData { common, seed, n, out } => {
            let config = load_config(&common.config)?;
            let gen = GenConfig {
                seed,
                ..config.gen.clone()
            };
            let data = dataio::generate(&gen, n)?;
            save_dataset(&out, &data, &config.gen.alphabet)?;
        }
        Command::Train {
            common,
            seed,
            data,
            init,
            out,
        } => {
            let config = load_config(&common.config)?;
            let data = load_data(&data, &config)?;
            let start: ModelParams<f64> = match init {
                Some(p) => load_checkpoint(&p)?,
                None => ModelParams::init_uniform(config.shape(), seed),
            };
            let mut train_cfg = config.train.clone();
            train_cfg.seed = seed;
            let trained = train(&start, &data, &train_cfg)?;
            save_checkpoint(&out, &trained.params)?;
        }
        Command::Score {
            common,
            seed,
            checkpoint,
            data,
            strategy,
            out,
        } => {
            let config = load_config(&common.config)?;
            let mut strat = strategy_from(&config, &strategy)?;
            strat.seed = seed;
            let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
            let pool = load_data(&data, &config)?;
            let records = score_pool(&params, &pool, &strat)?;
            write_score_dump(&out, &records)?;
        }
        Command::Select {
            common,
            scores,
            fraction,
            out,
        } => {
            load_config(&common.config)?;
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(UsageError("--fraction must lie in (0, 1]".into()).into());
            }
            let records = read_score_dump(&scores)?;
            let ids = select_batch(&records, fraction)?;
            let mut text = ids.join("\n");
            if !text.is_empty() {
                text.push('\n');
            }
            fs::write(&out, text)?;
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            transcripts,
        } => {
            let config = load_config(&common.config)?;
            let params: ModelParams<f64> = load_checkpoint(&checkpoint)?;
            let data = load_data(&data, &config)?;
            let report = evaluate(&params, &data, &config.gen.alphabet, config.eval_beam_width)?;
            write_json(&out, &report)?;
            if let Some(path) = transcripts {
                let (rows, _) = transcribe(&params, &data, &config.gen.alphabet, config.eval_beam_width)?;
                let mut buf = String::new();
                for r in &rows {
                    buf.push_str(&serde_json::to_string(r)?);
                    buf.push('\n');
                }
                fs::write(path, buf)?;
            }
        }
        Command::AlRun { common, seed, out } => {
            let mut config = load_config(&common.config)?;
            config.seeds = seed;
            if let Some(out) = out {
                config.output_dir = out;
            }
            let outcome = harness::run_experiment(&config)?;
            let order: Vec<String> = config.strategies.iter().map(StrategyConfig::tag).collect();
            print!("{}", outcome.table.render(&order, &config.query_fractions));
            return Ok(outcome.table.failed_cells());
        }
        Command::RankCompare {
            common,
            seed,
            strategy_a,
            strategy_b,
            out,
        } => {
            let config = load_config(&common.config)?;
            let a = strategy_from(&config, &strategy_a)?;
            let b = strategy_from(&config, &strategy_b)?;
            let replicate = Replicate::prepare(&config, seed)?;
            let (agreement, probe) = harness::rank_compare(&replicate, &a, &b, &out)?;
            println!(
                "spearman_rho={} kendall_tau={} probe_n={} probe_silence_fraction={} pool_silence_rate={}",
                agreement.spearman_rho,
                agreement.kendall_tau,
                probe.entries.len(),
                probe.silence_fraction,
                probe.pool_base_rate
            );
            for e in probe.entries.iter().take(20) {
                println!(
                    "  {} rank_a={:.4} rank_b={:.4} len={} silence={}",
                    e.id, e.normalized_rank_a, e.normalized_rank_b, e.reference_len, e.silence
                );
            }
        }
        Command::FisherCheck { common, seed, out } => {
            let config = load_config(&common.config)?;
            let report = harness::fisher_check(&config.fisher, seed)?;
            write_json(&out, &report)?;
            println!(
                "n*Var={:?} predicted={:?} rel_err={}",
                report.scaled_covariance, report.inverse_fisher, report.cov_rel_err
            );
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failed) => {
            eprintln!("error: {failed} cell(s) failed; see log.txt");
            ExitCode::from(1)
        }
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run `egl-lab --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
