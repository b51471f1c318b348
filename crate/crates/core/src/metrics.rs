//! Edit distance, corpus CER/WER, test-set evaluation, and rank agreement
//! between two strategies' scores.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::ctc_from_log_probs;
use crate::decode::top1;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seqmodel::{Alphabet, ForwardPass, ModelParams, Utterance};
use crate::strategies::ScoreRecord;

/// Levenshtein distance with unit insert/delete/substitute costs.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn corpus_rate<S: PartialEq>(
    refs: &[String],
    hyps: &[String],
    tokenize: impl Fn(&str) -> Vec<S>,
) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Input(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut errors = 0usize;
    let mut total = 0usize;
    for (r, h) in refs.iter().zip(hyps) {
        let (r, h) = (tokenize(r), tokenize(h));
        errors += edit_distance(&r, &h);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::UndefinedMetric("total reference length is zero".into()));
    }
    Ok(errors as f64 / total as f64)
}

/// Corpus character error rate; spaces count as characters.
pub fn cer(refs: &[String], hyps: &[String]) -> Result<f64> {
    corpus_rate(refs, hyps, |s| s.chars().collect())
}

fn words(s: &str) -> Vec<&str> {
    s.split(' ').filter(|w| !w.is_empty()).collect()
}

/// Corpus word error rate over space-separated tokens.
pub fn wer(refs: &[String], hyps: &[String]) -> Result<f64> {
    corpus_rate(refs, hyps, |s| words(s).into_iter().map(str::to_owned).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_ctc: f64,
    pub cer: f64,
    pub wer: f64,
    pub n_utts: usize,
    /// Utterances whose reference cannot be emitted in their frame count.
    pub n_excluded: usize,
}

/// Per-utterance evaluation detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub ctc_loss: f64,
}

/// Decodes each labeled utterance with beam top-1 and scores it.
pub fn transcribe<T: Scalar>(
    params: &ModelParams<T>,
    test_set: &[Utterance<T>],
    alphabet: &Alphabet,
    beam_width: usize,
) -> Result<(Vec<Transcript>, usize)> {
    let mut out = Vec::with_capacity(test_set.len());
    let mut excluded = 0;
    for utt in test_set {
        let reference = utt
            .reference
            .as_ref()
            .ok_or_else(|| Error::Input(format!("test utterance {} is unlabeled", utt.id)))?;
        let fp = ForwardPass::run(params, utt)?;
        let loss = match ctc_from_log_probs(fp.log_probs(), reference) {
            Ok(r) => r.neg_log_lik.as_f64(),
            Err(Error::Unrepresentable { .. }) => {
                excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let hyp = top1(&fp.probs(), beam_width);
        out.push(Transcript {
            id: utt.id.clone(),
            reference: alphabet.decode(reference),
            hypothesis: alphabet.decode(&hyp.label),
            ctc_loss: loss,
        });
    }
    Ok((out, excluded))
}

/// Mean reference CTC loss, corpus CER and corpus WER on a labeled set.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    test_set: &[Utterance<T>],
    alphabet: &Alphabet,
    beam_width: usize,
) -> Result<EvalReport> {
    let (rows, n_excluded) = transcribe(params, test_set, alphabet, beam_width)?;
    if rows.is_empty() {
        return Err(Error::UndefinedMetric("no evaluable utterances".into()));
    }
    let refs: Vec<String> = rows.iter().map(|r| r.reference.clone()).collect();
    let hyps: Vec<String> = rows.iter().map(|r| r.hypothesis.clone()).collect();
    let mean_ctc = rows.iter().map(|r| r.ctc_loss).sum::<f64>() / rows.len() as f64;
    // WER is undefined (not an error) when every reference is blank-only
    let wer = wer(&refs, &hyps).unwrap_or(f64::NAN);
    Ok(EvalReport {
        mean_ctc,
        cer: cer(&refs, &hyps)?,
        wer,
        n_utts: rows.len(),
        n_excluded,
    })
}

/// Ranks with ties replaced by their average (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rho: Pearson correlation of average-rank vectors.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's tau-b, `O(n^2)`.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    use std::cmp::Ordering::Equal;
    let n = x.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].partial_cmp(&x[j]).unwrap_or(Equal);
            let dy = y[i].partial_cmp(&y[j]).unwrap_or(Equal);
            match (dx, dy) {
                (Equal, Equal) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (Equal, _) => ties_x += 1,
                (_, Equal) => ties_y += 1,
                (a, b) if a == b => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2) as i64;
    let denom = (((pairs - ties_x) as f64) * ((pairs - ties_y) as f64)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    ((concordant - discordant) as f64 / denom).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankAgreement {
    pub spearman_rho: f64,
    pub kendall_tau: f64,
    /// `(normalized_rank_a, normalized_rank_b)` per utterance, ordered by id.
    pub scatter: Vec<(f64, f64)>,
}

/// Agreement between two scorings of the same pool.
pub fn rank_agreement(a: &[ScoreRecord], b: &[ScoreRecord]) -> Result<RankAgreement> {
    if a.len() < 2 {
        return Err(Error::Input("rank agreement needs at least two utterances".into()));
    }
    let by_id: HashMap<&str, &ScoreRecord> = b.iter().map(|r| (r.id.as_str(), r)).collect();
    if by_id.len() != b.len() || a.len() != b.len() {
        return Err(Error::Input("score sets differ in size or contain duplicate ids".into()));
    }
    let mut pairs = a
        .iter()
        .map(|ra| {
            by_id
                .get(ra.id.as_str())
                .map(|rb| (ra, *rb))
                .ok_or_else(|| Error::Input(format!("id {} missing from second score set", ra.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|x, y| x.0.id.cmp(&y.0.id));
    let sa: Vec<f64> = pairs.iter().map(|p| p.0.score).collect();
    let sb: Vec<f64> = pairs.iter().map(|p| p.1.score).collect();
    Ok(RankAgreement {
        spearman_rho: spearman(&sa, &sb),
        kendall_tau: kendall_tau_b(&sa, &sb),
        scatter: pairs
            .iter()
            .map(|p| (p.0.normalized_rank, p.1.normalized_rank))
            .collect(),
    })
}

/// CSV with header `rank_a,rank_b`.
pub fn write_scatter_csv(path: impl AsRef<Path>, scatter: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from("rank_a,rank_b\n");
    for (a, b) in scatter {
        writeln!(s, "{a},{b}").expect("write to string");
    }
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn edit_distance_examples() {
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(edit_distance(&k, &s), 3);
        assert_eq!(edit_distance(&k, &k), 0);
        let abc: Vec<char> = "abc".chars().collect();
        assert_eq!(edit_distance(&[], &abc), 3);
        assert_eq!(edit_distance(&abc, &[]), 3);
    }

    #[test]
    fn error_rates() {
        let refs = strs(&["the cat sat", "ab"]);
        assert_eq!(cer(&refs, &refs).unwrap(), 0.0);
        assert_eq!(wer(&refs, &refs).unwrap(), 0.0);
        assert!((wer(&strs(&["the cat sat"]), &strs(&["the cat"])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer(&strs(&["ab"]), &strs(&["ba"])).unwrap(), 1.0);
        assert!(matches!(cer(&strs(&[""]), &strs(&["x"])), Err(Error::UndefinedMetric(_))));
        assert!(cer(&strs(&["a"]), &strs(&[])).is_err());
    }

    #[test]
    fn spearman_example() {
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn kendall_extremes_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau_b(&x, &x), 1.0);
        assert_eq!(kendall_tau_b(&x, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        // one tie in y: n_c=5, n_d=0, n0=6, n2=1 -> 5/sqrt(6*5)
        let t = kendall_tau_b(&x, &[1.0, 2.0, 2.0, 3.0]);
        assert!((t - 5.0 / 30f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }
}
