//! Log-space CTC: collapse, forward-backward, loss and logit gradient, plus
//! exhaustive path enumeration used as an oracle for small lattices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{log_add, Scalar};

/// Reserved class index of the CTC blank.
pub const BLANK: u32 = 0;

/// Upper bound on `(V+1)^T` for the exhaustive oracles.
pub const MAX_ENUMERATED_PATHS: u64 = 1_000_000;

/// A collapsed label: class indices in `1..=V`, never blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelSeq(Vec<u32>);

impl LabelSeq {
    /// Wraps raw indices, rejecting blanks and indices above `num_symbols`.
    pub fn new(symbols: Vec<u32>, num_symbols: usize) -> Result<Self> {
        if let Some(&bad) = symbols
            .iter()
            .find(|&&s| s == BLANK || s as usize > num_symbols)
        {
            return Err(Error::Input(format!(
                "label symbol {bad} outside 1..={num_symbols}"
            )));
        }
        Ok(Self(symbols))
    }

    pub(crate) fn from_raw(symbols: Vec<u32>) -> Self {
        Self(symbols)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn symbols(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of adjacent equal pairs; each needs a separating blank frame.
    pub fn repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    /// Minimum number of frames able to emit this label.
    pub fn min_frames(&self) -> usize {
        self.len() + self.repeats()
    }

    pub fn max_symbol(&self) -> u32 {
        self.0.iter().copied().max().unwrap_or(BLANK)
    }

    /// Blank-interleaved label `[-, y1, -, y2, ..., yL, -]` of length `2L+1`.
    fn extended(&self) -> Vec<u32> {
        let mut ext = Vec::with_capacity(2 * self.len() + 1);
        ext.push(BLANK);
        for &s in &self.0 {
            ext.push(s);
            ext.push(BLANK);
        }
        ext
    }
}

/// Merges adjacent repeats, then drops blanks.
pub fn collapse(path: &[u32], num_classes: usize) -> Result<LabelSeq> {
    if let Some(&bad) = path.iter().find(|&&c| c as usize >= num_classes) {
        return Err(Error::Input(format!(
            "path class {bad} outside 0..{num_classes}"
        )));
    }
    Ok(collapse_unchecked(path))
}

fn collapse_unchecked(path: &[u32]) -> LabelSeq {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    LabelSeq(out)
}

/// Loss and gradient of one (lattice, label) pair.
#[derive(Clone, Debug)]
pub struct CtcResult<T> {
    /// `-ln p(label | x)`.
    pub neg_log_lik: T,
    /// d(neg_log_lik)/d(logits) = softmax - posterior occupancy.
    pub logit_grad: Matrix<T>,
}

/// Forward and backward variables over the blank-augmented label, in log space.
///
/// `log_alpha[t][s]` includes the emission at `t`; `log_beta[t][s]` covers
/// frames `t+1..T` only, so `alpha * beta` is the joint occupancy at `(t, s)`.
#[derive(Clone, Debug)]
pub struct ForwardBackward<T> {
    pub extended: Vec<u32>,
    pub log_alpha: Matrix<T>,
    pub log_beta: Matrix<T>,
    pub forward_log_lik: T,
    pub backward_log_lik: T,
}

fn check_representable<T: Scalar>(lattice: &Matrix<T>, label: &LabelSeq) -> Result<()> {
    let required = label.min_frames();
    if lattice.rows() < required {
        return Err(Error::Unrepresentable {
            label_len: label.len(),
            required,
            available: lattice.rows(),
        });
    }
    if label.max_symbol() as usize >= lattice.cols() {
        return Err(Error::Input(format!(
            "label symbol {} outside lattice with {} classes",
            label.max_symbol(),
            lattice.cols()
        )));
    }
    Ok(())
}

/// Runs the forward and backward recursions on log-probabilities.
pub fn forward_backward<T: Scalar>(
    log_probs: &Matrix<T>,
    label: &LabelSeq,
) -> Result<ForwardBackward<T>> {
    check_representable(log_probs, label)?;
    let frames = log_probs.rows();
    if frames == 0 {
        return Err(Error::Input("empty lattice".into()));
    }
    let ext = label.extended();
    let s_len = ext.len();
    let ninf = T::neg_infinity();

    // a skip from s-2 is allowed onto a non-blank that differs from ext[s-2]
    let can_skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2])
        .collect();

    let mut alpha = Matrix::from_vec(frames, s_len, vec![ninf; frames * s_len]).unwrap();
    alpha.set(0, 0, log_probs.get(0, ext[0] as usize));
    if s_len > 1 {
        alpha.set(0, 1, log_probs.get(0, ext[1] as usize));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.get(t - 1, s - 1));
            }
            if can_skip[s] {
                acc = log_add(acc, alpha.get(t - 1, s - 2));
            }
            if acc != ninf {
                alpha.set(t, s, acc + log_probs.get(t, ext[s] as usize));
            }
        }
    }

    let mut beta = Matrix::from_vec(frames, s_len, vec![ninf; frames * s_len]).unwrap();
    beta.set(frames - 1, s_len - 1, T::zero());
    if s_len > 1 {
        beta.set(frames - 1, s_len - 2, T::zero());
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let emit = |s2: usize| beta.get(t + 1, s2) + log_probs.get(t + 1, ext[s2] as usize);
            let mut acc = emit(s);
            if s + 1 < s_len {
                acc = log_add(acc, emit(s + 1));
            }
            if s + 2 < s_len && can_skip[s + 2] {
                acc = log_add(acc, emit(s + 2));
            }
            beta.set(t, s, acc);
        }
    }

    let mut forward_log_lik = alpha.get(frames - 1, s_len - 1);
    if s_len > 1 {
        forward_log_lik = log_add(forward_log_lik, alpha.get(frames - 1, s_len - 2));
    }
    let mut backward_log_lik = log_probs.get(0, ext[0] as usize) + beta.get(0, 0);
    if s_len > 1 {
        backward_log_lik = log_add(
            backward_log_lik,
            log_probs.get(0, ext[1] as usize) + beta.get(0, 1),
        );
    }

    Ok(ForwardBackward {
        extended: ext,
        log_alpha: alpha,
        log_beta: beta,
        forward_log_lik,
        backward_log_lik,
    })
}

/// CTC loss from per-frame log-probabilities (rows of a log-softmax).
///
/// This is the training path: the gradient is taken with respect to the
/// logits that produced `log_probs`.
pub fn ctc_from_log_probs<T: Scalar>(
    log_probs: &Matrix<T>,
    label: &LabelSeq,
) -> Result<CtcResult<T>> {
    let fb = forward_backward(log_probs, label)?;
    let log_lik = fb.forward_log_lik;
    if log_lik == T::neg_infinity() {
        // representable but every admissible path crosses a zero probability
        return Ok(CtcResult {
            neg_log_lik: T::infinity(),
            logit_grad: Matrix::zeros(log_probs.rows(), log_probs.cols()),
        });
    }
    let mut grad = log_probs.map(|lp| lp.exp());
    for t in 0..log_probs.rows() {
        let row = grad.row_mut(t);
        for (s, &class) in fb.extended.iter().enumerate() {
            let occ = fb.log_alpha.get(t, s) + fb.log_beta.get(t, s) - log_lik;
            if occ != T::neg_infinity() {
                row[class as usize] = row[class as usize] - occ.exp();
            }
        }
    }
    Ok(CtcResult {
        neg_log_lik: -log_lik,
        logit_grad: grad,
    })
}

fn row_tolerance<T: Scalar>() -> T {
    T::epsilon().sqrt() * T::lit(16.0)
}

fn check_distribution_rows<T: Scalar>(probs: &Matrix<T>) -> Result<()> {
    let tol = row_tolerance::<T>();
    for (t, row) in probs.iter_rows().enumerate() {
        if row.iter().any(|&p| !(p >= T::zero() && p.is_finite())) {
            return Err(Error::Input(format!("row {t} has a negative or non-finite entry")));
        }
        let sum: T = row.iter().copied().sum();
        if (sum - T::one()).abs() > tol {
            return Err(Error::Input(format!("row {t} sums to {sum}, not 1")));
        }
    }
    Ok(())
}

/// CTC loss on a probability lattice (rows are distributions over blank + symbols).
pub fn ctc_loss<T: Scalar>(probs: &Matrix<T>, label: &LabelSeq) -> Result<CtcResult<T>> {
    check_distribution_rows(probs)?;
    check_representable(probs, label)?;
    ctc_from_log_probs(&probs.map(|p| p.ln()), label)
}

fn checked_path_count(frames: usize, classes: usize) -> Result<u64> {
    let mut count: u64 = 1;
    for _ in 0..frames {
        count = count.saturating_mul(classes as u64);
        if count > MAX_ENUMERATED_PATHS {
            return Err(Error::Size(format!(
                "{classes}^{frames} paths exceed the enumeration limit {MAX_ENUMERATED_PATHS}"
            )));
        }
    }
    Ok(count)
}

/// Visits every frame-level path with its linear-space probability.
fn for_each_path<T: Scalar>(probs: &Matrix<T>, mut visit: impl FnMut(&[u32], T)) -> Result<()> {
    let frames = probs.rows();
    let classes = probs.cols();
    checked_path_count(frames, classes)?;
    if frames == 0 || classes == 0 {
        return Ok(());
    }
    let mut path = vec![0u32; frames];
    loop {
        let p = path
            .iter()
            .enumerate()
            .fold(T::one(), |acc, (t, &c)| acc * probs.get(t, c as usize));
        visit(&path, p);
        // odometer increment, last frame fastest
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(());
            }
            t -= 1;
            path[t] += 1;
            if (path[t] as usize) < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Exhaustive CTC negative log-likelihood; `+inf` when no path yields `label`.
pub fn ctc_brute_force<T: Scalar>(probs: &Matrix<T>, label: &LabelSeq) -> Result<T> {
    let mut total = T::zero();
    for_each_path(probs, |path, p| {
        if collapse_unchecked(path) == *label {
            total = total + p;
        }
    })?;
    Ok(if total > T::zero() {
        -total.ln()
    } else {
        T::infinity()
    })
}

/// Exact `p(y | x)` for every labeling of length at most `max_len`.
///
/// Sorted by descending probability, ties by label. Labelings with zero
/// mass are omitted.
pub fn marginal_over_labels<T: Scalar>(
    probs: &Matrix<T>,
    max_len: usize,
) -> Result<Vec<(LabelSeq, T)>> {
    let mut mass: BTreeMap<LabelSeq, T> = BTreeMap::new();
    for_each_path(probs, |path, p| {
        let y = collapse_unchecked(path);
        if y.len() <= max_len {
            let e = mass.entry(y).or_insert_with(T::zero);
            *e = *e + p;
        }
    })?;
    let mut out: Vec<_> = mass.into_iter().filter(|(_, p)| *p > T::zero()).collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}
