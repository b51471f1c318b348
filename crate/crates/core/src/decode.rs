//! Greedy decoding and prefix beam search over collapsed labelings.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::ctc::{LabelSeq, BLANK};
use crate::matrix::Matrix;
use crate::scalar::{log_add, Scalar};

/// A labeling with its total log-probability `ln p(y | x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis<T> {
    pub label: LabelSeq,
    pub log_prob: T,
}

/// Beam width used when none is configured: `max(4k, 32)`.
pub fn default_beam_width(k: usize) -> usize {
    (4 * k).max(32)
}

/// Per-frame argmax (ties to the lower class) followed by collapse.
pub fn greedy_decode<T: Scalar>(probs: &Matrix<T>) -> LabelSeq {
    let path: Vec<u32> = probs
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect();
    let mut out = Vec::new();
    let mut prev = None;
    for c in path {
        if Some(c) != prev && c != BLANK {
            out.push(c);
        }
        prev = Some(c);
    }
    LabelSeq::from_raw(out)
}

#[derive(Clone, Copy)]
struct Mass<T> {
    /// paths ending in blank
    blank: T,
    /// paths ending in the prefix's last symbol
    non_blank: T,
}

impl<T: Scalar> Mass<T> {
    fn empty() -> Self {
        Self {
            blank: T::neg_infinity(),
            non_blank: T::neg_infinity(),
        }
    }

    fn total(&self) -> T {
        log_add(self.blank, self.non_blank)
    }
}

fn by_score_then_label<T: Scalar>(a: (&[u32], T), b: (&[u32], T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// Prefix beam search returning the `k` most probable labelings.
///
/// Each beam entry is a collapsed prefix carrying the log-mass of paths that
/// end in blank and in its last symbol separately, so merging paths that
/// collapse to the same prefix is exact. With no pruning (beam width at
/// least the number of reachable prefixes) the result equals the exhaustive
/// top-k. A width below `k` is raised to `k`. Output is sorted by descending
/// probability, ties by label.
pub fn beam_search<T: Scalar>(probs: &Matrix<T>, beam_width: usize, k: usize) -> Vec<Hypothesis<T>> {
    let beam_width = beam_width.max(k).max(1);
    let classes = probs.cols();
    let log_probs = probs.map(|p| p.ln());

    let mut beam: Vec<(Vec<u32>, Mass<T>)> = vec![(
        Vec::new(),
        Mass {
            blank: T::zero(),
            non_blank: T::neg_infinity(),
        },
    )];

    for t in 0..probs.rows() {
        let lp = log_probs.row(t);
        let mut next: HashMap<Vec<u32>, Mass<T>> = HashMap::with_capacity(beam.len() * classes);
        // accumulation order follows the sorted beam, so sums are reproducible
        for (prefix, mass) in &beam {
            let total = mass.total();
            let last = prefix.last().copied();

            let e = next.entry(prefix.clone()).or_insert_with(Mass::empty);
            e.blank = log_add(e.blank, total + lp[BLANK as usize]);
            if let Some(c) = last {
                e.non_blank = log_add(e.non_blank, mass.non_blank + lp[c as usize]);
            }

            for c in 1..classes as u32 {
                let p = lp[c as usize];
                if p == T::neg_infinity() {
                    continue;
                }
                let from = if Some(c) == last { mass.blank } else { total };
                if from == T::neg_infinity() {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                let e = next.entry(extended).or_insert_with(Mass::empty);
                e.non_blank = log_add(e.non_blank, from + p);
            }
        }
        let mut entries: Vec<(Vec<u32>, Mass<T>, T)> = next
            .into_iter()
            .map(|(p, m)| {
                let total = m.total();
                (p, m, total)
            })
            .filter(|e| e.2 != T::neg_infinity())
            .collect();
        entries.sort_by(|a, b| by_score_then_label((&a.0, a.2), (&b.0, b.2)));
        entries.truncate(beam_width);
        beam = entries.into_iter().map(|(p, m, _)| (p, m)).collect();
    }

    beam.into_iter()
        .take(k)
        .map(|(prefix, mass)| Hypothesis {
            label: LabelSeq::from_raw(prefix),
            log_prob: mass.total(),
        })
        .collect()
}

/// Most probable labeling via beam search with `k = 1`.
pub fn top1<T: Scalar>(probs: &Matrix<T>, beam_width: usize) -> Hypothesis<T> {
    beam_search(probs, beam_width, 1)
        .into_iter()
        .next()
        .unwrap_or(Hypothesis {
            label: LabelSeq::empty(),
            log_prob: T::zero(),
        })
}
