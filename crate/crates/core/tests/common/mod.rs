//! Reference computations shared by the integration tests. Everything here is
//! written from the definitions, without calling into the library's numerics.
#![allow(dead_code)]

use std::collections::BTreeMap;

use egl_lab::{LabelSeq, Matrix, ModelParams, Shape, Utterance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random distribution rows: `frames x classes`, entries bounded away from 0.
pub fn random_probs(rng: &mut impl Rng, frames: usize, classes: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

pub fn matrix(rows: &[Vec<f64>]) -> Matrix<f64> {
    Matrix::from_rows(rows).unwrap()
}

/// Removes repeats, then blanks (class 0).
pub fn collapse_path(path: &[usize]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &c in path {
        if c != prev && c != 0 {
            out.push(c as u32);
        }
        prev = c;
    }
    out
}

/// Calls `f(path)` for every path in `classes^frames`, odometer order.
pub fn for_each_path(frames: usize, classes: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; frames];
    loop {
        f(&path);
        let mut i = frames;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
        }
    }
}

/// `p(y | x)` for every labeling with nonzero mass, by summing path products.
pub fn exhaustive_marginal(probs: &[Vec<f64>]) -> BTreeMap<Vec<u32>, f64> {
    let classes = probs[0].len();
    let mut out = BTreeMap::new();
    for_each_path(probs.len(), classes, |path| {
        let p: f64 = path.iter().enumerate().map(|(t, &c)| probs[t][c]).product();
        *out.entry(collapse_path(path)).or_insert(0.0) += p;
    });
    out
}

pub fn exhaustive_label_prob(probs: &[Vec<f64>], label: &[u32]) -> f64 {
    exhaustive_marginal(probs).get(label).copied().unwrap_or(0.0)
}

pub fn random_label(rng: &mut impl Rng, max_len: usize, symbols: usize, frames: usize) -> Vec<u32> {
    loop {
        let len = rng.gen_range(0..=max_len);
        let y: Vec<u32> = (0..len).map(|_| rng.gen_range(1..=symbols as u32)).collect();
        let repeats = y.windows(2).filter(|w| w[0] == w[1]).count();
        if y.len() + repeats <= frames {
            return y;
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Logits from the flat parameter vector, computed with explicit indexing.
///
/// Layout: `H = 0`: `W (C x F)`, `b (C)`.
/// `H > 0`: `Wx (H x F)`, `Wh (H x H)`, `bh (H)`, `Wo (C x H)`, `bo (C)`.
pub fn reference_logits(shape: Shape, theta: &[f64], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let f = shape.feature_dim;
    let h = shape.hidden_dim;
    let c = shape.num_symbols + 1;
    if h == 0 {
        let (w, b) = theta.split_at(c * f);
        return x
            .iter()
            .map(|xt| (0..c).map(|k| b[k] + (0..f).map(|j| w[k * f + j] * xt[j]).sum::<f64>()).collect())
            .collect();
    }
    let wx = &theta[..h * f];
    let wh = &theta[h * f..h * f + h * h];
    let bh = &theta[h * f + h * h..h * f + h * h + h];
    let off = h * f + h * h + h;
    let wo = &theta[off..off + c * h];
    let bo = &theta[off + c * h..off + c * h + c];
    let mut state = vec![0.0; h];
    let mut out = Vec::new();
    for xt in x {
        let next: Vec<f64> = (0..h)
            .map(|i| {
                let a = bh[i]
                    + (0..f).map(|j| wx[i * f + j] * xt[j]).sum::<f64>()
                    + (0..h).map(|j| wh[i * h + j] * state[j]).sum::<f64>();
                a.tanh()
            })
            .collect();
        state = next;
        out.push((0..c).map(|k| bo[k] + (0..h).map(|j| wo[k * h + j] * state[j]).sum::<f64>()).collect());
    }
    out
}

/// `-ln p(label | x)` via the reference forward and path enumeration.
pub fn reference_loss(shape: Shape, theta: &[f64], x: &[Vec<f64>], label: &[u32]) -> f64 {
    let probs: Vec<Vec<f64>> = reference_logits(shape, theta, x).iter().map(|z| softmax(z)).collect();
    -exhaustive_label_prob(&probs, label).ln()
}

pub fn random_params(rng: &mut impl Rng, shape: Shape, scale: f64) -> ModelParams<f64> {
    let values = (0..shape.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
    ModelParams::from_values(shape, values).unwrap()
}

pub fn random_features(rng: &mut impl Rng, frames: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..frames).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn utterance(id: &str, x: &[Vec<f64>]) -> Utterance<f64> {
    Utterance::new(id, matrix(x), None).unwrap()
}

pub fn label(symbols: &[u32], num_symbols: usize) -> LabelSeq {
    LabelSeq::new(symbols.to_vec(), num_symbols).unwrap()
}

/// Central finite difference of `f` along coordinate `i`.
pub fn central_diff(theta: &[f64], i: usize, step: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    plus[i] += step;
    minus[i] -= step;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
