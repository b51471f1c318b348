mod common;

use common::*;
use egl_lab::fisher::{
    asymptotic_check, bernoulli_toy, egl_maximizes_trace, estimate_fisher, expected_sq_grad_norm,
    predicted_probe_variance, trace_surrogate, AsymptoticSpec, FisherOptions, PoolDesign,
};
use egl_lab::harness::{fisher_check, FisherCheckConfig};
use egl_lab::{loss_and_grad, LabelSeq, Shape, Utterance};
use rand::Rng;

fn candidates(rng: &mut impl Rng, n: usize, frames_max: usize, dim: usize) -> Vec<Utterance<f64>> {
    (0..n)
        .map(|i| {
            let frames = rng.gen_range(1..=frames_max);
            utterance(&format!("c{i}"), &random_features(rng, frames, dim))
        })
        .collect()
}

#[test]
fn egl_equals_trace_of_each_candidate_fisher() {
    let mut rng = rng(51);
    for hidden in [0, 2] {
        let shape = Shape::new(2, hidden, 2);
        let params = random_params(&mut rng, shape, 1.0);
        let cands = candidates(&mut rng, 12, 5, 2);
        let report = egl_maximizes_trace(&cands, &params, 4096, 4096).unwrap();
        assert!(report.max_abs_diff < 1e-10, "H={hidden}: {}", report.max_abs_diff);
        assert!(report.orderings_equal);
    }
}

#[test]
fn fisher_trace_matches_exhaustive_expected_gradient_norm() {
    let mut rng = rng(52);
    let shape = Shape::new(2, 1, 2);
    let params = random_params(&mut rng, shape, 1.0);
    let cands = candidates(&mut rng, 4, 4, 2);
    let design = PoolDesign::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let opts = FisherOptions::new(4096, 4096);
    let fisher = estimate_fisher(&params, &design, &cands, &opts).unwrap();
    let mut want = 0.0;
    for (utt, &q) in cands.iter().zip(design.weights()) {
        let probs: Vec<Vec<f64>> = reference_logits(shape, &params.values, &features(utt))
            .iter()
            .map(|z| softmax(z))
            .collect();
        for (y, p) in exhaustive_marginal(&probs) {
            let (_, g) = loss_and_grad(&params, utt, &LabelSeq::new(y, 2).unwrap()).unwrap();
            want += q * p * g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    assert!((trace_surrogate(&fisher) - want).abs() < 1e-10 * want);
    assert!((expected_sq_grad_norm(&params, &design, &cands, &opts).unwrap() - want).abs() < 1e-10 * want);
    assert_eq!(fisher.max_asymmetry(), 0.0);
    assert!(fisher.min_eigenvalue() > -1e-12);
}

fn features(utt: &Utterance<f64>) -> Vec<Vec<f64>> {
    utt.features.to_rows()
}

#[test]
fn toy_fisher_closed_form() {
    // p(a) = sigmoid(theta x), so I(theta) = x^2 p (1 - p)
    for (theta, x) in [(0.0, 1.0), (0.7, 1.0), (-0.3, 2.0)] {
        let (params, utt, free) = bernoulli_toy(theta, x, "x");
        let opts = FisherOptions {
            free: Some(vec![free]),
            ..FisherOptions::new(2, 8)
        };
        let fisher = estimate_fisher(&params, &PoolDesign::uniform(1), &[utt], &opts).unwrap();
        let p = 1.0 / (1.0 + (-theta * x).exp());
        assert!((fisher.matrix[(0, 0)] - x * x * p * (1.0 - p)).abs() < 1e-14);
    }
}

fn toy_cfg(n: usize, replicates: usize) -> FisherCheckConfig {
    FisherCheckConfig {
        n,
        replicates,
        ..FisherCheckConfig::default()
    }
}

#[test]
fn toy_scaled_variance_approaches_inverse_fisher() {
    let report = fisher_check(&toy_cfg(500, 1000), 7).unwrap();
    assert_eq!(report.inverse_fisher[0][0], 4.0);
    let scaled = report.scaled_covariance[0][0];
    assert!((3.4..=4.6).contains(&scaled), "n Var = {scaled}");
    assert_eq!(report.non_converged, 0);
}

#[test]
fn doubling_replicates_keeps_the_estimate_stable() {
    let a = fisher_check(&toy_cfg(300, 800), 9).unwrap().scaled_covariance[0][0];
    let b = fisher_check(&toy_cfg(300, 1600), 9).unwrap().scaled_covariance[0][0];
    // the Monte-Carlo standard error of a variance from R draws is about sqrt(2/R)
    assert!((a - b).abs() / 4.0 < 0.15, "{a} vs {b}");
}

#[test]
fn higher_trace_design_gives_lower_variance() {
    // candidates x = 1 and x = 2 at theta = 0: I_q = (q1 + 4 q2) / 4
    let (truth, _, free) = bernoulli_toy(0.0, 1.0, "x0");
    let cands = vec![bernoulli_toy(0.0, 1.0, "x0").1, bernoulli_toy(0.0, 2.0, "x1").1];
    let run = |w: Vec<f64>| {
        asymptotic_check(
            &truth,
            &cands,
            &AsymptoticSpec {
                design: PoolDesign::new(w).unwrap(),
                n: 400,
                replicates: 1000,
                seed: 3,
                free: Some(vec![free]),
                probe: None,
            },
        )
        .unwrap()
    };
    let low = run(vec![0.9, 0.1]);
    let high = run(vec![0.1, 0.9]);
    assert!((low.inverse_fisher[0][0] - 4.0 / 1.3).abs() < 1e-12);
    assert!((high.inverse_fisher[0][0] - 4.0 / 3.7).abs() < 1e-12);
    assert!(high.scaled_covariance[0][0] < low.scaled_covariance[0][0]);
    assert!(high.predicted_probe_variance < low.predicted_probe_variance);
    for r in [&low, &high] {
        assert!(r.cov_rel_err < 0.15, "{}", r.cov_rel_err);
        assert!(r.loss_var_rel_err < 0.25, "{}", r.loss_var_rel_err);
    }
    let direct = predicted_probe_variance(
        &truth,
        &PoolDesign::new(vec![0.1, 0.9]).unwrap(),
        &cands,
        (0, &LabelSeq::empty()),
        Some(&[free]),
        400,
    )
    .unwrap();
    assert!((direct - high.predicted_probe_variance).abs() < 1e-15);
}

#[test]
fn two_parameter_covariance_matches_inverse_fisher() {
    // free weight and bias of class a with features x = 1 and x = -1.5
    let (mut truth, _, w) = bernoulli_toy(0.4, 1.0, "x0");
    let bias = 3;
    truth.values[bias] = -0.2;
    let cands = vec![bernoulli_toy(0.0, 1.0, "x0").1, bernoulli_toy(0.0, -1.5, "x1").1];
    let report = asymptotic_check(
        &truth,
        &cands,
        &AsymptoticSpec {
            design: PoolDesign::uniform(2),
            n: 500,
            replicates: 1000,
            seed: 5,
            free: Some(vec![w, bias]),
            probe: None,
        },
    )
    .unwrap();
    assert!(report.condition_number < 1e3);
    assert!(report.cov_rel_err < 0.15, "{}", report.cov_rel_err);
    assert!(report.test_avg_loss_var_rel_err < 0.25, "{}", report.test_avg_loss_var_rel_err);
}

#[test]
fn singular_design_is_reported() {
    let (truth, _, free) = bernoulli_toy(0.0, 1.0, "x0");
    let cands = vec![bernoulli_toy(0.0, 0.0, "x0").1];
    let err = asymptotic_check(
        &truth,
        &cands,
        &AsymptoticSpec {
            design: PoolDesign::uniform(1),
            n: 10,
            replicates: 10,
            seed: 1,
            free: Some(vec![free]),
            probe: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, egl_lab::Error::SingularFisher { .. }), "{err}");
}
