//! Query strategies mapping (model, unlabeled pool) to informativeness scores.
//!
//! Higher score means more informative for every strategy:
//! * `random`: seeded hash of (seed, utterance id)
//! * `entropy`: mean per-frame entropy of the output distribution
//! * `pctc`: CTC loss of the model's own best labeling, per frame
//! * `egl`: expected gradient length, `sum_y p(y|x) ||grad l(x, y)||^2` over
//!   the top-k labelings from beam search

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::ctc_from_log_probs;
use crate::decode::{beam_search, default_beam_width, greedy_decode, top1};
use crate::error::{Error, Result};
use crate::seqmodel::{ForwardPass, ModelParams, ParamGroup, Utterance};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    Entropy,
    Pctc,
    Egl,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Entropy => "entropy",
            StrategyKind::Pctc => "pctc",
            StrategyKind::Egl => "egl",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "entropy" => Ok(Self::Entropy),
            "pctc" => Ok(Self::Pctc),
            "egl" => Ok(Self::Egl),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Display tag; derived from the other fields when absent.
    pub name: Option<String>,
    /// Number of labelings EGL marginalizes over.
    pub k: usize,
    /// `||g||^2` when true, `||g||` otherwise.
    pub squared: bool,
    /// Divide the top-k weights by their sum.
    pub renormalize_topk: bool,
    /// Divide the EGL score by the number of frames.
    pub length_normalize: bool,
    /// Seed of the random strategy.
    pub seed: u64,
    /// Defaults to `max(4k, 32)`.
    pub beam_width: Option<usize>,
    /// pCTC uses greedy decoding instead of beam top-1.
    pub greedy_top1: bool,
    /// Restrict EGL gradient norms to these parameter groups.
    pub param_groups: Option<Vec<ParamGroup>>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Egl,
            name: None,
            k: 100,
            squared: true,
            renormalize_topk: false,
            length_normalize: false,
            seed: 0,
            beam_width: None,
            greedy_top1: false,
            param_groups: None,
        }
    }
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn tag(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        match self.kind {
            StrategyKind::Egl if !self.squared => "egl-unsquared".into(),
            kind => kind.as_str().into(),
        }
    }

    pub fn beam_width(&self) -> usize {
        self.beam_width.unwrap_or_else(|| default_beam_width(self.k))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.beam_width() < self.k {
            return Err(Error::Config(format!(
                "beam_width {} smaller than k {}",
                self.beam_width(),
                self.k
            )));
        }
        Ok(())
    }
}

/// One utterance's score within a ranked pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub strategy: String,
    pub score: f64,
    /// 1 = most informative.
    pub rank: usize,
    /// `(N - rank) / (N - 1)`, so 1 = most informative.
    pub normalized_rank: f64,
}

/// Mean per-frame entropy (nats) of the model's output distributions.
pub fn score_entropy<T: Scalar>(params: &ModelParams<T>, utt: &Utterance<T>) -> Result<T> {
    let fp = ForwardPass::run(params, utt)?;
    Ok(mean_entropy(fp.log_probs()))
}

fn mean_entropy<T: Scalar>(log_probs: &crate::matrix::Matrix<T>) -> T {
    let total = log_probs.iter_rows().fold(T::zero(), |acc, row| {
        let h = row.iter().fold(T::zero(), |h, &lp| {
            if lp == T::neg_infinity() {
                h
            } else {
                h - lp.exp() * lp
            }
        });
        acc + h.max(T::zero())
    });
    total / T::from_usize_lossy(log_probs.rows())
}

/// CTC loss of the model's best labeling divided by the frame count.
pub fn score_pctc<T: Scalar>(
    params: &ModelParams<T>,
    utt: &Utterance<T>,
    cfg: &StrategyConfig,
) -> Result<T> {
    let fp = ForwardPass::run(params, utt)?;
    let probs = fp.probs();
    let best = if cfg.greedy_top1 {
        greedy_decode(&probs)
    } else {
        top1(&probs, cfg.beam_width()).label
    };
    let loss = ctc_from_log_probs(fp.log_probs(), &best)?.neg_log_lik;
    Ok(loss.max(T::zero()) / T::from_usize_lossy(utt.frames()))
}

/// Expected gradient length over the top-k beam-search labelings.
pub fn score_egl<T: Scalar>(
    params: &ModelParams<T>,
    utt: &Utterance<T>,
    cfg: &StrategyConfig,
) -> Result<T> {
    let fp = ForwardPass::run(params, utt)?;
    let hyps = beam_search(&fp.probs(), cfg.beam_width(), cfg.k);
    let mask = cfg
        .param_groups
        .as_ref()
        .map(|groups| params.shape.mask_indices(groups));

    let mut terms = Vec::with_capacity(hyps.len());
    for hyp in &hyps {
        match fp.loss_and_grad(&hyp.label) {
            Ok((_, grad)) => {
                let sq = match &mask {
                    Some(idx) => idx.iter().fold(T::zero(), |a, &i| a + grad[i] * grad[i]),
                    None => grad.iter().fold(T::zero(), |a, &g| a + g * g),
                };
                let length = if cfg.squared { sq } else { sq.sqrt() };
                terms.push((hyp.log_prob.exp(), length));
            }
            Err(Error::Unrepresentable { .. }) => {
                warn!("utterance {}: skipping unrepresentable hypothesis", utt.id);
            }
            Err(e) => return Err(e),
        }
    }
    let norm = if cfg.renormalize_topk {
        let mass: T = terms.iter().map(|t| t.0).sum();
        if mass > T::zero() {
            mass
        } else {
            T::one()
        }
    } else {
        T::one()
    };
    let mut score = terms.iter().fold(T::zero(), |acc, &(w, l)| acc + w / norm * l);
    if cfg.length_normalize {
        score = score / T::from_usize_lossy(utt.frames());
    }
    Ok(score)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pseudo-random score in [0, 1) depending only on `(seed, id)`.
pub fn random_score(seed: u64, id: &str) -> f64 {
    let h = splitmix64(splitmix64(seed) ^ fnv1a(id.as_bytes()));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Random-baseline records for a pool.
pub fn score_random<T>(pool: &[Utterance<T>], seed: u64) -> Vec<ScoreRecord> {
    let scores = pool
        .iter()
        .map(|u| (u.id.clone(), random_score(seed, &u.id)))
        .collect();
    rank_records(scores, StrategyKind::Random.as_str())
}

/// Informativeness of a single utterance under `cfg`.
pub fn score_utterance<T: Scalar>(
    params: &ModelParams<T>,
    utt: &Utterance<T>,
    cfg: &StrategyConfig,
) -> Result<f64> {
    Ok(match cfg.kind {
        StrategyKind::Random => random_score(cfg.seed, &utt.id),
        StrategyKind::Entropy => score_entropy(params, utt)?.as_f64(),
        StrategyKind::Pctc => score_pctc(params, utt, cfg)?.as_f64(),
        StrategyKind::Egl => score_egl(params, utt, cfg)?.as_f64(),
    })
}

/// Scores and ranks a pool. Records come back in rank order.
///
/// Utterances are scored in parallel; each score is computed by one task with
/// a fixed summation order, so results do not depend on the thread count.
pub fn score_pool<T: Scalar>(
    params: &ModelParams<T>,
    pool: &[Utterance<T>],
    cfg: &StrategyConfig,
) -> Result<Vec<ScoreRecord>> {
    cfg.validate()?;
    let scores = pool
        .par_iter()
        .map(|u| score_utterance(params, u, cfg).map(|s| (u.id.clone(), s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_records(scores, &cfg.tag()))
}

fn by_score_desc_then_id(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    // NaN sorts last
    b.1.partial_cmp(&a.1)
        .unwrap_or_else(|| a.1.is_nan().cmp(&b.1.is_nan()))
        .then_with(|| a.0.cmp(&b.0))
}

/// Assigns ranks (1 = highest score, ties by ascending id).
pub fn rank_records(mut scores: Vec<(String, f64)>, strategy: &str) -> Vec<ScoreRecord> {
    scores.sort_by(by_score_desc_then_id);
    let n = scores.len();
    scores
        .into_iter()
        .enumerate()
        .map(|(i, (id, score))| {
            let rank = i + 1;
            let normalized_rank = if n > 1 {
                (n - rank) as f64 / (n - 1) as f64
            } else {
                1.0
            };
            ScoreRecord {
                id,
                strategy: strategy.to_string(),
                score,
                rank,
                normalized_rank,
            }
        })
        .collect()
}

/// `ceil(q * n)`, tolerant of representation error in `q * n`.
pub fn query_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
    count.clamp(usize::from(n > 0), n)
}

/// Ids of the `ceil(q * N)` highest-scoring records, ties by ascending id.
pub fn select_batch(records: &[ScoreRecord], fraction: f64) -> Result<Vec<String>> {
    if records.is_empty() {
        return Err(Error::Input("no records to select from".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Input(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut scored: Vec<(String, f64)> = records.iter().map(|r| (r.id.clone(), r.score)).collect();
    scored.sort_by(by_score_desc_then_id);
    let count = query_count(fraction, records.len());
    Ok(scored.into_iter().take(count).map(|(id, _)| id).collect())
}

/// Writes one JSON object per line: `{id, strategy, score, rank, normalized_rank}`.
pub fn write_score_dump(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_score_dump(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(records)
}
