//! Synthetic utterance generation, dataset splits, the label oracle, and the
//! JSON-lines dataset format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::seqmodel::{Alphabet, Utterance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Output symbols; V is its length.
    pub alphabet: Alphabet,
    pub feature_dim: usize,
    /// Inclusive label length range of regular utterances.
    pub label_len: (usize, usize),
    /// Inclusive frames-per-symbol range.
    pub frames_per_symbol: (usize, usize),
    pub noise_sigma: f64,
    /// Probability that an utterance is a short silence/filler clip.
    pub silence_fraction: f64,
    /// Standard deviation of the background noise in silence clips.
    pub silence_sigma: f64,
    /// Constant added to every feature of a silence frame.
    pub silence_offset: f64,
    /// Inclusive frame-count range of silence clips.
    pub silence_frames: (usize, usize),
    /// Probability that a silence clip is labeled with the filler symbol
    /// (the first alphabet symbol) instead of the empty label.
    pub filler_prob: f64,
    /// Draw each symbol uniformly among those differing from its predecessor.
    pub no_adjacent_repeats: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            alphabet: Alphabet::new("abcdefg ").expect("default alphabet"),
            feature_dim: 8,
            label_len: (1, 6),
            frames_per_symbol: (2, 4),
            noise_sigma: 0.6,
            silence_fraction: 0.1,
            silence_sigma: 1.0,
            silence_offset: 0.0,
            silence_frames: (2, 4),
            filler_prob: 0.0,
            no_adjacent_repeats: true,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (lmin, lmax) = self.label_len;
        let (dmin, dmax) = self.frames_per_symbol;
        if lmin < 1 || lmin > lmax {
            return Err(Error::Config(format!("label_len range {lmin}..={lmax} invalid")));
        }
        if dmin < 1 || dmin > dmax {
            return Err(Error::Config(format!("frames_per_symbol range {dmin}..={dmax} invalid")));
        }
        let (smin, smax) = self.silence_frames;
        if smin < 1 || smin > smax {
            return Err(Error::Config(format!("silence_frames range {smin}..={smax} invalid")));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.no_adjacent_repeats && self.alphabet.len() < 2 && lmax > 1 {
            return Err(Error::Config("no_adjacent_repeats needs at least two symbols".into()));
        }
        for (name, v) in [
            ("silence_fraction", self.silence_fraction),
            ("filler_prob", self.filler_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.silence_sigma >= 0.0 && self.silence_offset.is_finite()) {
            return Err(Error::Config("noise scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-symbol frame embeddings: basis vectors when V <= F, else seeded
    /// random unit vectors.
    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        let v = self.alphabet.len();
        let f = self.feature_dim;
        if v <= f {
            return (0..v)
                .map(|k| (0..f).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
                .collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x00e3_b0c4_4298_fc1c);
        (0..v)
            .map(|_| loop {
                let e: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break e.into_iter().map(|x| x / norm).collect();
                }
            })
            .collect()
    }
}

struct Generator<'a> {
    cfg: &'a GenConfig,
    embeddings: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a GenConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            embeddings: cfg.embeddings(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    fn noise(&mut self, sigma: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        sigma * z
    }

    fn utterance(&mut self, id: String) -> Utterance<f64> {
        let cfg = self.cfg;
        let f = cfg.feature_dim;
        let v = cfg.alphabet.len() as u32;
        let (dmin, dmax) = cfg.frames_per_symbol;

        if self.rng.gen_bool(cfg.silence_fraction) {
            let frames = self.rng.gen_range(cfg.silence_frames.0..=cfg.silence_frames.1);
            let data = (0..frames * f)
                .map(|_| cfg.silence_offset + self.noise(cfg.silence_sigma))
                .collect();
            let filler = self.rng.gen_bool(cfg.filler_prob);
            let reference = LabelSeq::from_raw(if filler { vec![1] } else { vec![] });
            return Utterance {
                id,
                features: Matrix::from_vec(frames, f, data).expect("frame buffer"),
                reference: Some(reference),
                silence: true,
            };
        }

        let len = self.rng.gen_range(cfg.label_len.0..=cfg.label_len.1);
        let mut symbols: Vec<u32> = Vec::with_capacity(len);
        for _ in 0..len {
            let s = match symbols.last() {
                Some(&prev) if cfg.no_adjacent_repeats => {
                    let s = self.rng.gen_range(1..v);
                    if s >= prev {
                        s + 1
                    } else {
                        s
                    }
                }
                _ => self.rng.gen_range(1..=v),
            };
            symbols.push(s);
        }
        let mut data = Vec::new();
        for &s in &symbols {
            let frames = self.rng.gen_range(dmin..=dmax);
            for _ in 0..frames {
                for i in 0..f {
                    let e = self.embeddings[s as usize - 1][i];
                    data.push(e + self.noise(cfg.noise_sigma));
                }
            }
        }
        let frames = data.len() / f;
        Utterance {
            id,
            features: Matrix::from_vec(frames, f, data).expect("frame buffer"),
            reference: Some(LabelSeq::from_raw(symbols)),
            silence: false,
        }
    }
}

/// `n` labeled utterances with ids `u000000, u000001, ...`; deterministic in the seed.
pub fn generate(config: &GenConfig, n: usize) -> Result<Vec<Utterance<f64>>> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mut g = Generator::new(config)?;
    Ok((0..n).map(|i| g.utterance(format!("u{i:06}"))).collect())
}

/// Labeled seed set, unlabeled pool and labeled test set.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled_seed: Vec<Utterance<f64>>,
    /// References removed; they live in `oracle`.
    pub unlabeled_pool: Vec<Utterance<f64>>,
    pub test: Vec<Utterance<f64>>,
    pub oracle: LabelOracle,
}

impl DatasetSplit {
    /// Draws the three splits from one seeded stream; ids are prefixed
    /// `seed-`, `pool-` and `test-`.
    pub fn generate(config: &GenConfig, n_seed: usize, n_pool: usize, n_test: usize) -> Result<Self> {
        let mut g = Generator::new(config)?;
        let mut draw = |prefix: &str, n: usize| -> Vec<Utterance<f64>> {
            (0..n).map(|i| g.utterance(format!("{prefix}-{i:06}"))).collect()
        };
        let labeled_seed = draw("seed", n_seed);
        let pool = draw("pool", n_pool);
        let test = draw("test", n_test);
        let (unlabeled_pool, oracle) = LabelOracle::hide(pool);
        Ok(Self {
            labeled_seed,
            unlabeled_pool,
            test,
            oracle,
        })
    }
}

/// Holds pool references and bills each distinct id once.
#[derive(Clone, Debug, Default)]
pub struct LabelOracle {
    held: BTreeMap<String, Utterance<f64>>,
    queried: BTreeSet<String>,
}

/// Serialized form of the oracle's budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub queried_ids: Vec<String>,
    pub total: usize,
}

impl LabelOracle {
    /// Strips references from `pool`, keeping them for later queries.
    pub fn hide(pool: Vec<Utterance<f64>>) -> (Vec<Utterance<f64>>, Self) {
        let mut held = BTreeMap::new();
        let mut stripped = Vec::with_capacity(pool.len());
        for utt in pool {
            let mut hidden = utt.clone();
            hidden.reference = None;
            stripped.push(hidden);
            held.insert(utt.id.clone(), utt);
        }
        (
            stripped,
            Self {
                held,
                queried: BTreeSet::new(),
            },
        )
    }

    /// Reveals labels for `ids`; unknown ids fail the whole query.
    pub fn query(&mut self, ids: &[String]) -> Result<Vec<(Utterance<f64>, LabelSeq)>> {
        if let Some(bad) = ids.iter().find(|id| !self.held.contains_key(*id)) {
            return Err(Error::Input(format!("unknown pool id {bad}")));
        }
        Ok(ids
            .iter()
            .map(|id| {
                self.queried.insert(id.clone());
                let utt = self.held[id].clone();
                let label = utt.reference.clone().unwrap_or_default();
                (utt, label)
            })
            .collect())
    }

    pub fn budget(&self) -> usize {
        self.queried.len()
    }

    pub fn ledger(&self) -> BudgetLedger {
        BudgetLedger {
            queried_ids: self.queried.iter().cloned().collect(),
            total: self.queried.len(),
        }
    }

    /// Fresh oracle over the same pool with an empty budget.
    pub fn fresh(&self) -> Self {
        Self {
            held: self.held.clone(),
            queried: BTreeSet::new(),
        }
    }

    /// Whether the held utterance is a generated silence clip.
    pub fn is_silence(&self, id: &str) -> Option<bool> {
        self.held.get(id).map(|u| u.silence)
    }

    pub fn reference(&self, id: &str) -> Option<&LabelSeq> {
        self.held.get(id).and_then(|u| u.reference.as_ref())
    }
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine<T> {
    id: String,
    frames: Vec<Vec<T>>,
    reference: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    silence: bool,
}

fn to_line<T: Scalar>(utt: &Utterance<T>, alphabet: &Alphabet) -> UtteranceLine<T> {
    UtteranceLine {
        id: utt.id.clone(),
        frames: utt.features.to_rows(),
        reference: utt.reference.as_ref().map(|r| alphabet.decode(r)),
        silence: utt.silence,
    }
}

/// JSON-lines: `{id, frames: [[...], ...], reference: string | null}`.
pub fn save_dataset<T: Scalar>(
    path: impl AsRef<Path>,
    data: &[Utterance<T>],
    alphabet: &Alphabet,
) -> Result<()> {
    let mut buf = Vec::new();
    for utt in data {
        serde_json::to_writer(&mut buf, &to_line(utt, alphabet))?;
        buf.push(b'\n');
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>, alphabet: &Alphabet) -> Result<Vec<Utterance<T>>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: lineno, msg };
        let rec: UtteranceLine<T> =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let features = Matrix::from_rows(&rec.frames).ok_or_else(|| parse_err("ragged frames".into()))?;
        let reference = rec
            .reference
            .map(|r| alphabet.encode(&r))
            .transpose()
            .map_err(|e| parse_err(e.to_string()))?;
        let mut utt = Utterance::new(rec.id, features, reference).map_err(|e| parse_err(e.to_string()))?;
        utt.silence = rec.silence;
        out.push(utt);
    }
    Ok(out)
}
