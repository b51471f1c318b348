//! Fisher-information checks for the gradient-length criterion.
//!
//! The Fisher matrix under a sampling design `q` is
//! `I_q = sum_x q(x) sum_y p(y|x) g g^T` with `g = grad l(x, y)`. Its trace
//! is the design-weighted expected squared gradient norm, which for a point
//! mass design is exactly one candidate's EGL score. The asymptotic check
//! refits the model on many simulated samples and compares the estimator's
//! spread against `I_q^{-1} / n`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{marginal_over_labels, LabelSeq};
use crate::decode::beam_search;
use crate::error::{Error, Result};
use crate::seqmodel::{ForwardPass, ModelParams, Shape, Utterance};
use crate::strategies::{score_egl, StrategyConfig, StrategyKind};

/// Largest parameter count accepted by [`estimate_fisher`].
pub const MAX_FISHER_PARAMS: usize = 200;
/// Largest parameter count accepted by [`asymptotic_check`].
pub const MAX_ASYMPTOTIC_PARAMS: usize = 10;
const MAX_CONDITION_NUMBER: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    /// Number of (candidate, labeling) terms accumulated.
    pub n_samples: usize,
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let m = &self.matrix;
        (&m.transpose() - m).abs().max()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        SymmetricEigen::new(self.matrix.clone()).eigenvalues
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().min()
    }

    /// Ratio of extreme eigenvalue magnitudes; infinite when singular.
    pub fn condition_number(&self) -> f64 {
        let ev = self.eigenvalues();
        let max = ev.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
        let min = ev.iter().fold(f64::INFINITY, |a, &e| a.min(e.abs()));
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        let cond = self.condition_number();
        if !(cond < MAX_CONDITION_NUMBER) {
            return Err(Error::SingularFisher {
                condition_number: cond,
                detail: format!("{}x{} matrix is not invertible", self.dim(), self.dim()),
            });
        }
        self.matrix
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SingularFisher {
                condition_number: cond,
                detail: "LU inversion failed".into(),
            })
    }
}

/// Sampling distribution over a finite candidate set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolDesign {
    weights: Vec<f64>,
}

impl PoolDesign {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Input("design weights must be non-negative and finite".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("design weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[at] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Which labelings enter the Fisher sums, and over which parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherOptions {
    /// Number of labelings per candidate.
    pub k: usize,
    pub beam_width: usize,
    /// Flat indices of the free parameters; all parameters when `None`.
    pub free: Option<Vec<usize>>,
}

impl FisherOptions {
    pub fn new(k: usize, beam_width: usize) -> Self {
        Self {
            k,
            beam_width,
            free: None,
        }
    }

    fn free_indices(&self, shape: &Shape) -> Vec<usize> {
        self.free
            .clone()
            .unwrap_or_else(|| (0..shape.param_count()).collect())
    }
}

/// `(p(y|x), restricted gradient)` for the top-k labelings of one candidate.
fn scored_labelings(
    params: &ModelParams<f64>,
    utt: &Utterance<f64>,
    opts: &FisherOptions,
    free: &[usize],
) -> Result<Vec<(f64, DVector<f64>)>> {
    let fp = ForwardPass::run(params, utt)?;
    let hyps = beam_search(&fp.probs(), opts.beam_width, opts.k);
    hyps.iter()
        .map(|h| {
            let (_, g) = fp.loss_and_grad(&h.label)?;
            Ok((h.log_prob.exp(), DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]))))
        })
        .collect()
}

fn check_inputs(design: &PoolDesign, candidates: &[Utterance<f64>], k: usize) -> Result<()> {
    if design.weights.len() != candidates.len() {
        return Err(Error::Input(format!(
            "design has {} weights for {} candidates",
            design.weights.len(),
            candidates.len()
        )));
    }
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    Ok(())
}

/// `sum_x q(x) sum_y p(y|x) g g^T` over the top-k labelings of each candidate.
pub fn estimate_fisher(
    params: &ModelParams<f64>,
    design: &PoolDesign,
    candidates: &[Utterance<f64>],
    opts: &FisherOptions,
) -> Result<FisherMatrix> {
    check_inputs(design, candidates, opts.k)?;
    let free = opts.free_indices(&params.shape);
    if free.len() > MAX_FISHER_PARAMS {
        return Err(Error::Size(format!(
            "{} parameters exceed the Fisher limit {MAX_FISHER_PARAMS}",
            free.len()
        )));
    }
    let p = free.len();
    let mut m = DMatrix::zeros(p, p);
    let mut n_samples = 0;
    for (utt, &w) in candidates.iter().zip(&design.weights) {
        if w == 0.0 {
            continue;
        }
        for (prob, g) in scored_labelings(params, utt, opts, &free)? {
            m.ger(w * prob, &g, &g, 1.0);
            n_samples += 1;
        }
    }
    // exact symmetry
    let m = (&m + &m.transpose()) * 0.5;
    Ok(FisherMatrix { matrix: m, n_samples })
}

pub fn trace_surrogate(fisher: &FisherMatrix) -> f64 {
    fisher.matrix.trace()
}

/// `sum_x q(x) sum_y p(y|x) ||g||^2`, accumulated directly from gradient norms.
pub fn expected_sq_grad_norm(
    params: &ModelParams<f64>,
    design: &PoolDesign,
    candidates: &[Utterance<f64>],
    opts: &FisherOptions,
) -> Result<f64> {
    check_inputs(design, candidates, opts.k)?;
    let free = opts.free_indices(&params.shape);
    let mut total = 0.0;
    for (utt, &w) in candidates.iter().zip(&design.weights) {
        if w == 0.0 {
            continue;
        }
        for (prob, g) in scored_labelings(params, utt, opts, &free)? {
            total += w * prob * g.norm_squared();
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub egl_scores: Vec<f64>,
    pub traces: Vec<f64>,
    pub max_abs_diff: f64,
    pub orderings_equal: bool,
}

fn ordering(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Compares each candidate's squared EGL score with the trace of its own
/// Fisher contribution (point-mass design).
pub fn egl_maximizes_trace(
    candidates: &[Utterance<f64>],
    params: &ModelParams<f64>,
    k: usize,
    beam_width: usize,
) -> Result<TraceReport> {
    let cfg = StrategyConfig {
        kind: StrategyKind::Egl,
        k,
        beam_width: Some(beam_width),
        squared: true,
        ..StrategyConfig::default()
    };
    let opts = FisherOptions::new(k, beam_width);
    let mut egl_scores = Vec::with_capacity(candidates.len());
    let mut traces = Vec::with_capacity(candidates.len());
    for (i, utt) in candidates.iter().enumerate() {
        egl_scores.push(score_egl(params, utt, &cfg)?);
        let design = PoolDesign::point_mass(candidates.len(), i);
        traces.push(trace_surrogate(&estimate_fisher(params, &design, candidates, &opts)?));
    }
    let max_abs_diff = egl_scores
        .iter()
        .zip(&traces)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let orderings_equal = ordering(&egl_scores) == ordering(&traces);
    Ok(TraceReport {
        egl_scores,
        traces,
        max_abs_diff,
        orderings_equal,
    })
}

/// The single-parameter Bernoulli toy: one frame with scalar feature `x`,
/// classes {blank, a}, blank logit pinned to zero and `p(a) = sigmoid(theta x)`.
///
/// Returns the parameters at `theta`, the utterance, and the free index.
pub fn bernoulli_toy(theta: f64, x: f64, id: &str) -> (ModelParams<f64>, Utterance<f64>, usize) {
    let shape = Shape::new(1, 0, 1);
    let mut params = ModelParams::zeros(shape);
    // W is (classes x features) row-major: index 1 is W[a, 0]
    let free = 1;
    params.values[free] = theta;
    let utt = Utterance::new(
        id,
        crate::matrix::Matrix::from_rows(&[vec![x]]).expect("one frame"),
        None,
    )
    .expect("finite feature");
    (params, utt, free)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticSpec {
    pub design: PoolDesign,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Free parameter indices; all when `None`.
    pub free: Option<Vec<usize>>,
    /// Fixed probe `(candidate index, label)`; defaults to candidate 0 and
    /// its most probable labeling.
    pub probe: Option<(usize, LabelSeq)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub design: Vec<f64>,
    pub n: usize,
    pub replicates: usize,
    /// `||n Cov(theta_n) - I^{-1}||_F / ||I^{-1}||_F`.
    pub cov_rel_err: f64,
    /// Fixed-probe loss variance against `g^T I^{-1} g / n`.
    pub loss_var_rel_err: f64,
    /// Same comparison averaged over candidates (uniform) and their labelings.
    pub test_avg_loss_var_rel_err: f64,
    pub condition_number: f64,
    pub scaled_covariance: Vec<Vec<f64>>,
    pub inverse_fisher: Vec<Vec<f64>>,
    pub empirical_probe_variance: f64,
    pub predicted_probe_variance: f64,
    pub non_converged: usize,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Exact labeling distribution of each candidate at `params`.
fn exact_label_distributions(
    params: &ModelParams<f64>,
    candidates: &[Utterance<f64>],
) -> Result<Vec<Vec<(LabelSeq, f64)>>> {
    candidates
        .iter()
        .map(|u| {
            let fp = ForwardPass::run(params, u)?;
            marginal_over_labels(&fp.probs(), u.frames())
        })
        .collect()
}

fn restricted_grad(
    params: &ModelParams<f64>,
    utt: &Utterance<f64>,
    label: &LabelSeq,
    free: &[usize],
) -> Result<(f64, DVector<f64>)> {
    let (loss, g) = crate::seqmodel::loss_and_grad(params, utt, label)?;
    Ok((loss, DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]))))
}

/// Exact Fisher at `params` with all labelings enumerated.
fn exact_fisher(
    params: &ModelParams<f64>,
    weights: &[f64],
    candidates: &[Utterance<f64>],
    free: &[usize],
) -> Result<DMatrix<f64>> {
    let dists = exact_label_distributions(params, candidates)?;
    let mut m = DMatrix::zeros(free.len(), free.len());
    for ((utt, dist), &w) in candidates.iter().zip(&dists).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (label, p) in dist {
            let (_, g) = restricted_grad(params, utt, label, free)?;
            m.ger(w * p, &g, &g, 1.0);
        }
    }
    Ok((&m + &m.transpose()) * 0.5)
}

fn with_free(base: &ModelParams<f64>, free: &[usize], theta: &DVector<f64>) -> ModelParams<f64> {
    let mut p = base.clone();
    for (j, &i) in free.iter().enumerate() {
        p.values[i] = theta[j];
    }
    p
}

/// Sampled data summarized as counts per (candidate, labeling).
struct Sample {
    counts: Vec<Vec<usize>>,
    n: usize,
}

fn mean_loss_and_grad(
    params: &ModelParams<f64>,
    candidates: &[Utterance<f64>],
    labels: &[Vec<(LabelSeq, f64)>],
    sample: &Sample,
    free: &[usize],
) -> Result<(f64, DVector<f64>)> {
    let mut loss = 0.0;
    let mut grad = DVector::zeros(free.len());
    for (c, counts) in sample.counts.iter().enumerate() {
        for (j, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let (l, g) = restricted_grad(params, &candidates[c], &labels[c][j].0, free)?;
            let w = count as f64 / sample.n as f64;
            loss += w * l;
            grad.axpy(w, &g, 1.0);
        }
    }
    Ok((loss, grad))
}

/// Maximum-likelihood refit by Fisher scoring with step halving.
fn fit_mle(
    truth: &ModelParams<f64>,
    candidates: &[Utterance<f64>],
    labels: &[Vec<(LabelSeq, f64)>],
    sample: &Sample,
    free: &[usize],
) -> Result<(DVector<f64>, bool)> {
    let empirical: Vec<f64> = sample
        .counts
        .iter()
        .map(|c| c.iter().sum::<usize>() as f64 / sample.n as f64)
        .collect();
    let mut theta = DVector::from_iterator(free.len(), free.iter().map(|&i| truth.values[i]));
    let mut params = truth.clone();
    let (mut loss, mut grad) = mean_loss_and_grad(&params, candidates, labels, sample, free)?;
    for _ in 0..100 {
        let info = exact_fisher(&params, &empirical, candidates, free)?;
        let Some(step) = info.lu().solve(&grad) else {
            return Ok((theta, false));
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &theta - &step * scale;
            let cand_params = with_free(truth, free, &cand);
            let (l, g) = mean_loss_and_grad(&cand_params, candidates, labels, sample, free)?;
            if l <= loss + 1e-15 * loss.abs() {
                theta = cand;
                params = cand_params;
                loss = l;
                grad = g;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        let step_size = step.amax() * scale;
        if !accepted || step_size < 1e-11 * (1.0 + theta.amax()) || grad.amax() < 1e-13 {
            return Ok((theta, accepted || grad.amax() < 1e-9));
        }
    }
    Ok((theta, grad.amax() < 1e-9))
}

fn sample_index(rng: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let total = *cdf.last().expect("non-empty distribution");
    cdf.iter().position(|&c| u * total < c).unwrap_or(cdf.len() - 1)
}

fn cumulative(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    xs.scan(0.0, |acc, x| {
        *acc += x;
        Some(*acc)
    })
    .collect()
}

/// `g^T I_q^{-1} g / n` for a fixed probe under design `q`.
pub fn predicted_probe_variance(
    params: &ModelParams<f64>,
    design: &PoolDesign,
    candidates: &[Utterance<f64>],
    probe: (usize, &LabelSeq),
    free: Option<&[usize]>,
    n: usize,
) -> Result<f64> {
    check_inputs(design, candidates, 1)?;
    let all: Vec<usize> = (0..params.shape.param_count()).collect();
    let free = free.unwrap_or(&all);
    let fisher = FisherMatrix {
        matrix: exact_fisher(params, &design.weights, candidates, free)?,
        n_samples: 0,
    };
    let inv = fisher.inverse()?;
    let (_, g) = restricted_grad(params, &candidates[probe.0], probe.1, free)?;
    Ok((g.transpose() * &inv * &g)[(0, 0)] / n as f64)
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Monte-Carlo check of the asymptotic covariance `I_q^{-1} / n` and of the
/// first-order loss variance `g^T I_q^{-1} g / n`.
///
/// Replicates draw `n` pairs with `x ~ q` and `y ~ p(y|x, truth)` by exact
/// enumeration, then refit the free parameters to the maximum-likelihood
/// point. Replicates run sequentially from one seeded stream.
pub fn asymptotic_check(
    truth: &ModelParams<f64>,
    candidates: &[Utterance<f64>],
    spec: &AsymptoticSpec,
) -> Result<AsymptoticReport> {
    check_inputs(&spec.design, candidates, 1)?;
    let all: Vec<usize> = (0..truth.shape.param_count()).collect();
    let free = spec.free.clone().unwrap_or(all);
    if free.len() > MAX_ASYMPTOTIC_PARAMS {
        return Err(Error::Size(format!(
            "{} free parameters exceed the asymptotic-check limit {MAX_ASYMPTOTIC_PARAMS}",
            free.len()
        )));
    }
    if spec.n < 2 || spec.replicates < 2 {
        return Err(Error::Input("need n >= 2 and replicates >= 2".into()));
    }

    let labels = exact_label_distributions(truth, candidates)?;
    let fisher = FisherMatrix {
        matrix: exact_fisher(truth, &spec.design.weights, candidates, &free)?,
        n_samples: labels.iter().map(Vec::len).sum(),
    };
    let condition_number = fisher.condition_number();
    let inv = fisher.inverse()?;

    let (probe_c, probe_label) = match &spec.probe {
        Some((c, y)) => (*c, y.clone()),
        None => (0, labels[0][0].0.clone()),
    };
    if probe_c >= candidates.len() {
        return Err(Error::Input(format!("probe candidate {probe_c} out of range")));
    }
    let (_, probe_grad) = restricted_grad(truth, &candidates[probe_c], &probe_label, &free)?;
    let predicted_probe_variance = (probe_grad.transpose() * &inv * &probe_grad)[(0, 0)] / spec.n as f64;

    // test-averaged terms: uniform over candidates, exact labelings
    let test_terms: Vec<(usize, LabelSeq, f64, f64)> = {
        let mut terms = Vec::new();
        let u = 1.0 / candidates.len() as f64;
        for (c, dist) in labels.iter().enumerate() {
            for (y, p) in dist {
                let (_, g) = restricted_grad(truth, &candidates[c], y, &free)?;
                let pred = (g.transpose() * &inv * &g)[(0, 0)] / spec.n as f64;
                terms.push((c, y.clone(), u * p, pred));
            }
        }
        terms
    };

    let design_cdf = cumulative(spec.design.weights.iter().copied());
    let label_cdfs: Vec<Vec<f64>> = labels
        .iter()
        .map(|d| cumulative(d.iter().map(|(_, p)| *p)))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut estimates: Vec<DVector<f64>> = Vec::with_capacity(spec.replicates);
    let mut probe_losses = Vec::with_capacity(spec.replicates);
    let mut test_losses: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.replicates); test_terms.len()];
    let mut non_converged = 0;
    for _ in 0..spec.replicates {
        let mut counts: Vec<Vec<usize>> = labels.iter().map(|d| vec![0; d.len()]).collect();
        for _ in 0..spec.n {
            let c = sample_index(&mut rng, &design_cdf);
            let j = sample_index(&mut rng, &label_cdfs[c]);
            counts[c][j] += 1;
        }
        let sample = Sample { counts, n: spec.n };
        let (theta, converged) = fit_mle(truth, candidates, &labels, &sample, &free)?;
        if !converged {
            non_converged += 1;
        }
        let fitted = with_free(truth, &free, &theta);
        let (probe_loss, _) = restricted_grad(&fitted, &candidates[probe_c], &probe_label, &free)?;
        probe_losses.push(probe_loss);
        for (slot, (c, y, _, _)) in test_losses.iter_mut().zip(&test_terms) {
            slot.push(restricted_grad(&fitted, &candidates[*c], y, &free)?.0);
        }
        estimates.push(theta);
    }

    let r = spec.replicates as f64;
    let p = free.len();
    let mean = estimates.iter().fold(DVector::zeros(p), |acc, e| acc + e) / r;
    let mut cov = DMatrix::zeros(p, p);
    for e in &estimates {
        let d = e - &mean;
        cov.ger(1.0 / (r - 1.0), &d, &d, 1.0);
    }
    let scaled = cov * spec.n as f64;
    let cov_rel_err = (&scaled - &inv).norm() / inv.norm();

    let empirical_probe_variance = variance(&probe_losses);
    let loss_var_rel_err =
        (empirical_probe_variance - predicted_probe_variance).abs() / predicted_probe_variance;

    let (mut emp_avg, mut pred_avg) = (0.0, 0.0);
    for ((_, _, w, pred), losses) in test_terms.iter().zip(&test_losses) {
        emp_avg += w * variance(losses);
        pred_avg += w * pred;
    }
    let test_avg_loss_var_rel_err = (emp_avg - pred_avg).abs() / pred_avg;

    Ok(AsymptoticReport {
        design: spec.design.weights.clone(),
        n: spec.n,
        replicates: spec.replicates,
        cov_rel_err,
        loss_var_rel_err,
        test_avg_loss_var_rel_err,
        condition_number,
        scaled_covariance: to_rows(&scaled),
        inverse_fisher: to_rows(&inv),
        empirical_probe_variance,
        predicted_probe_variance,
        non_converged,
    })
}
