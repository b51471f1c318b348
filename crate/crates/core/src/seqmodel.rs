//! Frame classifier emitting per-frame distributions over blank + symbols.
//!
//! Two architectures share one flat parameter vector:
//! * `hidden_dim == 0`: logits_t = W x_t + b
//! * `hidden_dim > 0`: h_t = tanh(Wx x_t + Wh h_{t-1} + bh), h_0 = 0,
//!   logits_t = Wo h_t + bo
//!
//! Gradients are analytic (backpropagation through time for the recurrent
//! variant) and are taken through a fused log-softmax + CTC.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_from_log_probs, LabelSeq, BLANK};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Output symbols; class 0 is the blank, symbol `i` maps to class `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    /// Number of non-blank symbols (V).
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Output classes including the blank (V + 1).
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbol(&self, class: u32) -> Option<char> {
        if class == BLANK {
            return None;
        }
        self.symbols.get(class as usize - 1).copied()
    }

    pub fn class_of(&self, c: char) -> Option<u32> {
        self.symbols.iter().position(|&s| s == c).map(|i| i as u32 + 1)
    }

    pub fn encode(&self, text: &str) -> Result<LabelSeq> {
        let classes = text
            .chars()
            .map(|c| {
                self.class_of(c)
                    .ok_or_else(|| Error::Input(format!("symbol {c:?} not in alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSeq::new(classes, self.len())
    }

    pub fn decode(&self, label: &LabelSeq) -> String {
        label
            .symbols()
            .iter()
            .map(|&c| self.symbol(c).unwrap_or('?'))
            .collect()
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.symbols.into_iter().collect()
    }
}

/// Architecture descriptor. Serialized as `{F, H, V}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    #[serde(rename = "F")]
    pub feature_dim: usize,
    #[serde(rename = "H")]
    pub hidden_dim: usize,
    #[serde(rename = "V")]
    pub num_symbols: usize,
}

/// Named slices of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// `W` (linear) or `Wx` (recurrent).
    Input,
    /// `Wh`; empty for the linear model.
    Recurrent,
    /// `bh`; empty for the linear model.
    HiddenBias,
    /// `Wo`; empty for the linear model.
    Output,
    /// `b` (linear) or `bo` (recurrent).
    OutputBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Input,
        ParamGroup::Recurrent,
        ParamGroup::HiddenBias,
        ParamGroup::Output,
        ParamGroup::OutputBias,
    ];
}

impl Shape {
    pub fn new(feature_dim: usize, hidden_dim: usize, num_symbols: usize) -> Self {
        Self {
            feature_dim,
            hidden_dim,
            num_symbols,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_symbols + 1
    }

    pub fn param_count(&self) -> usize {
        let (f, h, c) = (self.feature_dim, self.hidden_dim, self.num_classes());
        if h == 0 {
            c * f + c
        } else {
            h * f + h * h + h + c * h + c
        }
    }

    pub fn group_range(&self, group: ParamGroup) -> Range<usize> {
        let (f, h, c) = (self.feature_dim, self.hidden_dim, self.num_classes());
        if h == 0 {
            return match group {
                ParamGroup::Input => 0..c * f,
                ParamGroup::OutputBias => c * f..c * f + c,
                _ => c * f..c * f,
            };
        }
        let wx = 0..h * f;
        let wh = wx.end..wx.end + h * h;
        let bh = wh.end..wh.end + h;
        let wo = bh.end..bh.end + c * h;
        let bo = wo.end..wo.end + c;
        match group {
            ParamGroup::Input => wx,
            ParamGroup::Recurrent => wh,
            ParamGroup::HiddenBias => bh,
            ParamGroup::Output => wo,
            ParamGroup::OutputBias => bo,
        }
    }

    /// Flat indices covered by `groups`, in ascending order.
    pub fn mask_indices(&self, groups: &[ParamGroup]) -> Vec<usize> {
        let mut idx: Vec<usize> = groups
            .iter()
            .flat_map(|&g| self.group_range(g))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// Flat parameter vector plus its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub shape: Shape,
    pub values: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            values: vec![T::zero(); shape.param_count()],
        }
    }

    /// Uniform in [-0.1, 0.1] from a seeded generator.
    pub fn init_uniform(shape: Shape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..shape.param_count())
            .map(|_| T::lit(rng.gen_range(-0.1..=0.1)))
            .collect();
        Self { shape, values }
    }

    pub fn from_values(shape: Shape, values: Vec<T>) -> Result<Self> {
        let p = Self { shape, values };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.shape.param_count() {
            return Err(Error::Input(format!(
                "parameter vector has {} entries, shape needs {}",
                self.values.len(),
                self.shape.param_count()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn group(&self, group: ParamGroup) -> &[T] {
        &self.values[self.shape.group_range(group)]
    }
}

/// One input sequence. `reference` is the transcription when known.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance<T> {
    pub id: String,
    pub features: Matrix<T>,
    pub reference: Option<LabelSeq>,
    /// Marks generated silence/filler utterances; never used by scoring.
    pub silence: bool,
}

impl<T: Scalar> Utterance<T> {
    pub fn new(id: impl Into<String>, features: Matrix<T>, reference: Option<LabelSeq>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Input("utterance needs at least one frame".into()));
        }
        if !features.is_finite() {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(Self {
            id: id.into(),
            features,
            reference,
            silence: false,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Unnormalized per-frame scores, `T x (V+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitLattice<T>(pub Matrix<T>);

impl<T: Scalar> LogitLattice<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(lattice: &LogitLattice<T>) -> Matrix<T> {
    log_softmax_rows(lattice).map(|x| x.exp())
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<T: Scalar>(lattice: &LogitLattice<T>) -> Matrix<T> {
    let m = lattice.matrix();
    let mut out = m.clone();
    for t in 0..m.rows() {
        let row = out.row_mut(t);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        for x in row.iter_mut() {
            *x = *x - lse;
        }
    }
    out
}

/// Forward pass results retained for repeated backward passes.
///
/// Scoring strategies backpropagate many candidate labels through one
/// utterance; the forward work is shared.
#[derive(Clone, Debug)]
pub struct ForwardPass<'a, T> {
    params: &'a ModelParams<T>,
    features: &'a Matrix<T>,
    hidden: Option<Matrix<T>>,
    logits: LogitLattice<T>,
    log_probs: Matrix<T>,
}

impl<'a, T: Scalar> ForwardPass<'a, T> {
    pub fn run(params: &'a ModelParams<T>, utt: &'a Utterance<T>) -> Result<Self> {
        let shape = params.shape;
        if utt.feature_dim() != shape.feature_dim {
            return Err(Error::Input(format!(
                "utterance {} has feature dim {}, model expects {}",
                utt.id,
                utt.feature_dim(),
                shape.feature_dim
            )));
        }
        if params.values.len() != shape.param_count() {
            return Err(Error::Input("parameter vector does not match shape".into()));
        }
        let x = &utt.features;
        let (f, h, c) = (shape.feature_dim, shape.hidden_dim, shape.num_classes());
        let frames = x.rows();
        let mut logits = Matrix::zeros(frames, c);
        let hidden = if h == 0 {
            let w = params.group(ParamGroup::Input);
            let b = params.group(ParamGroup::OutputBias);
            for t in 0..frames {
                let xt = x.row(t);
                let out = logits.row_mut(t);
                for k in 0..c {
                    out[k] = dot(&w[k * f..(k + 1) * f], xt) + b[k];
                }
            }
            None
        } else {
            let wx = params.group(ParamGroup::Input);
            let wh = params.group(ParamGroup::Recurrent);
            let bh = params.group(ParamGroup::HiddenBias);
            let wo = params.group(ParamGroup::Output);
            let bo = params.group(ParamGroup::OutputBias);
            let mut hs = Matrix::zeros(frames, h);
            let mut prev = vec![T::zero(); h];
            for t in 0..frames {
                let xt = x.row(t);
                let ht = hs.row_mut(t);
                for j in 0..h {
                    let a = dot(&wx[j * f..(j + 1) * f], xt) + dot(&wh[j * h..(j + 1) * h], &prev) + bh[j];
                    ht[j] = a.tanh();
                }
                prev.copy_from_slice(ht);
                let out = logits.row_mut(t);
                for k in 0..c {
                    out[k] = dot(&wo[k * h..(k + 1) * h], &prev) + bo[k];
                }
            }
            Some(hs)
        };
        let logits = LogitLattice(logits);
        let log_probs = log_softmax_rows(&logits);
        Ok(Self {
            params,
            features: x,
            hidden,
            logits,
            log_probs,
        })
    }

    pub fn logits(&self) -> &LogitLattice<T> {
        &self.logits
    }

    pub fn log_probs(&self) -> &Matrix<T> {
        &self.log_probs
    }

    pub fn probs(&self) -> Matrix<T> {
        self.log_probs.map(|x| x.exp())
    }

    /// CTC loss of `label` and its gradient with respect to all parameters.
    pub fn loss_and_grad(&self, label: &LabelSeq) -> Result<(T, Vec<T>)> {
        let ctc = ctc_from_log_probs(&self.log_probs, label)?;
        Ok((ctc.neg_log_lik, self.backward(&ctc.logit_grad)))
    }

    /// Backpropagates a logit gradient to the parameter vector.
    pub fn backward(&self, dlogits: &Matrix<T>) -> Vec<T> {
        let shape = self.params.shape;
        let (f, h, c) = (shape.feature_dim, shape.hidden_dim, shape.num_classes());
        let x = self.features;
        let frames = x.rows();
        let mut grad = vec![T::zero(); shape.param_count()];
        let Some(hs) = &self.hidden else {
            let w_range = shape.group_range(ParamGroup::Input);
            let b_off = shape.group_range(ParamGroup::OutputBias).start;
            for t in 0..frames {
                let xt = x.row(t);
                for (k, &d) in dlogits.row(t).iter().enumerate() {
                    let gw = &mut grad[w_range.start + k * f..w_range.start + (k + 1) * f];
                    for (g, &xi) in gw.iter_mut().zip(xt) {
                        *g = *g + d * xi;
                    }
                    grad[b_off + k] = grad[b_off + k] + d;
                }
            }
            return grad;
        };

        let r_wx = shape.group_range(ParamGroup::Input);
        let r_wh = shape.group_range(ParamGroup::Recurrent);
        let r_bh = shape.group_range(ParamGroup::HiddenBias);
        let r_wo = shape.group_range(ParamGroup::Output);
        let r_bo = shape.group_range(ParamGroup::OutputBias);
        let wh = self.params.group(ParamGroup::Recurrent);
        let wo = self.params.group(ParamGroup::Output);

        // gradient flowing into h_t from step t+1
        let mut carry = vec![T::zero(); h];
        let mut dh = vec![T::zero(); h];
        let mut da = vec![T::zero(); h];
        for t in (0..frames).rev() {
            let ht = hs.row(t);
            let dl = dlogits.row(t);
            dh.copy_from_slice(&carry);
            for k in 0..c {
                let d = dl[k];
                grad[r_bo.start + k] = grad[r_bo.start + k] + d;
                let row = r_wo.start + k * h;
                for j in 0..h {
                    grad[row + j] = grad[row + j] + d * ht[j];
                    dh[j] = dh[j] + d * wo[k * h + j];
                }
            }
            for j in 0..h {
                da[j] = dh[j] * (T::one() - ht[j] * ht[j]);
            }
            let xt = x.row(t);
            for j in 0..h {
                let d = da[j];
                grad[r_bh.start + j] = grad[r_bh.start + j] + d;
                let row = r_wx.start + j * f;
                for (i, &xi) in xt.iter().enumerate() {
                    grad[row + i] = grad[row + i] + d * xi;
                }
                if t > 0 {
                    let hp = hs.row(t - 1);
                    let row = r_wh.start + j * h;
                    for (i, &hi) in hp.iter().enumerate() {
                        grad[row + i] = grad[row + i] + d * hi;
                    }
                }
            }
            for i in 0..h {
                carry[i] = (0..h).fold(T::zero(), |acc, j| acc + wh[j * h + i] * da[j]);
            }
        }
        grad
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn forward<T: Scalar>(params: &ModelParams<T>, utt: &Utterance<T>) -> Result<LogitLattice<T>> {
    Ok(ForwardPass::run(params, utt)?.logits)
}

/// CTC negative log-likelihood of `label` and its parameter gradient.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    utt: &Utterance<T>,
    label: &LabelSeq,
) -> Result<(T, Vec<T>)> {
    ForwardPass::run(params, utt)?.loss_and_grad(label)
}

/// Early stopping on relative improvement of the epoch-mean loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub rel_tol: f64,
    pub patience: usize,
}

impl Default for Convergence {
    fn default() -> Self {
        Self {
            rel_tol: 1e-4,
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Maximum number of epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplicative learning-rate decay applied after each epoch.
    pub lr_decay: f64,
    pub convergence: Option<Convergence>,
    /// Rescale minibatch gradients whose L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            lr_decay: 1.0,
            convergence: Some(Convergence::default()),
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Trained<T> {
    pub params: ModelParams<T>,
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean CTC loss of `params` over labeled utterances.
pub fn mean_loss<T: Scalar>(params: &ModelParams<T>, data: &[Utterance<T>]) -> Result<f64> {
    let mut total = 0.0;
    for utt in data {
        let label = reference_of(utt)?;
        let fp = ForwardPass::run(params, utt)?;
        total += ctc_from_log_probs(fp.log_probs(), label)?.neg_log_lik.as_f64();
    }
    Ok(total / data.len().max(1) as f64)
}

fn reference_of<T>(utt: &Utterance<T>) -> Result<&LabelSeq> {
    utt.reference
        .as_ref()
        .ok_or_else(|| Error::Input(format!("utterance {} has no reference label", utt.id)))
}

/// Minibatch gradient descent on the mean CTC loss.
///
/// Bit-reproducible for a fixed `config.seed` and input order.
pub fn train<T: Scalar>(
    params: &ModelParams<T>,
    data: &[Utterance<T>],
    config: &TrainConfig,
) -> Result<Trained<T>> {
    config.validate()?;
    params.validate()?;
    for utt in data {
        let label = reference_of(utt)?;
        if utt.frames() < label.min_frames() {
            return Err(Error::Unrepresentable {
                label_len: label.len(),
                required: label.min_frames(),
                available: utt.frames(),
            });
        }
        if utt.feature_dim() != params.shape.feature_dim {
            return Err(Error::Input(format!("utterance {} has wrong feature dim", utt.id)));
        }
    }

    let mut current = params.clone();
    let mut epoch_losses = Vec::new();
    if data.is_empty() || config.epochs == 0 {
        return Ok(Trained {
            params: current,
            epoch_losses,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = config.learning_rate;
    let mut stalled = 0usize;
    let n_params = current.values.len();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut grad = vec![T::zero(); n_params];
            for &i in batch {
                let utt = &data[i];
                let fp = ForwardPass::run(&current, utt)?;
                let (loss, g) = fp.loss_and_grad(reference_of(utt)?)?;
                epoch_total += loss.as_f64();
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc = *acc + gi;
                }
            }
            let scale = T::one() / T::from_usize_lossy(batch.len());
            let mut step = T::lit(lr) * scale;
            if let Some(clip) = config.clip_norm {
                let norm = grad.iter().fold(T::zero(), |a, &g| a + g * g).sqrt() * scale;
                if norm > T::lit(clip) {
                    step = step * T::lit(clip) / norm;
                }
            }
            for (v, g) in current.values.iter_mut().zip(&grad) {
                *v = *v - step * *g;
            }
        }
        let mean = epoch_total / data.len() as f64;
        if !mean.is_finite() || current.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        if let (Some(conv), Some(&prev)) = (config.convergence, epoch_losses.last()) {
            let prev: f64 = prev;
            let rel = (prev - mean) / prev.abs().max(f64::MIN_POSITIVE);
            if rel < conv.rel_tol {
                stalled += 1;
            } else {
                stalled = 0;
            }
            epoch_losses.push(mean);
            if stalled >= conv.patience {
                break;
            }
        } else {
            epoch_losses.push(mean);
        }
        lr *= config.lr_decay;
    }
    Ok(Trained {
        params: current,
        epoch_losses,
    })
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    schema_version: u32,
    shape: Shape,
    values: Vec<T>,
}

/// Writes `{schema_version, shape{F,H,V}, values}` as JSON.
///
/// Floats use the shortest representation that parses back to the same bits.
pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    let ckpt = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        shape: params.shape,
        values: params.values.clone(),
    };
    let mut text = serde_json::to_string(&ckpt)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint<T> = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint schema {}",
            ckpt.schema_version
        )));
    }
    ModelParams::from_values(ckpt.shape, ckpt.values)
}
