mod common;

use common::*;
use egl_lab::ctc::{ctc_from_log_probs, forward_backward};
use egl_lab::{collapse, ctc_brute_force, ctc_loss, marginal_over_labels, Error, LabelSeq};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn loss_matches_path_enumeration() {
    let mut rng = rng(11);
    for _ in 0..60 {
        let frames = rng.gen_range(1..=6);
        let v = rng.gen_range(1..=3);
        let probs = random_probs(&mut rng, frames, v + 1);
        let y = random_label(&mut rng, frames, v, frames);
        let expected = -exhaustive_label_prob(&probs, &y).ln();
        let got = ctc_loss(&matrix(&probs), &label(&y, v)).unwrap().neg_log_lik;
        let brute = ctc_brute_force(&matrix(&probs), &label(&y, v)).unwrap();
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
        assert!((brute - expected).abs() < 1e-10);
    }
}

#[test]
fn two_frames_two_classes_nine_alignments() {
    // V = 2, classes {blank, a, b}; the 9 paths split as
    // {} <- bb; a <- aa, a_, _a; b <- bb', b_, _b; ab <- ab; ba <- ba
    let p = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]];
    let probs: Vec<Vec<f64>> = p.iter().map(|r| r.to_vec()).collect();
    let by_hand = [
        (vec![], p[0][0] * p[1][0]),
        (vec![1], p[0][1] * p[1][1] + p[0][1] * p[1][0] + p[0][0] * p[1][1]),
        (vec![2], p[0][2] * p[1][2] + p[0][2] * p[1][0] + p[0][0] * p[1][2]),
        (vec![1, 2], p[0][1] * p[1][2]),
        (vec![2, 1], p[0][2] * p[1][1]),
    ];
    let total: f64 = by_hand.iter().map(|(_, q)| q).sum();
    assert!((total - 1.0).abs() < 1e-15);
    for (y, q) in by_hand {
        let got = ctc_loss(&matrix(&probs), &label(&y, 2)).unwrap().neg_log_lik;
        assert!((got + q.ln()).abs() < 1e-12, "label {y:?}");
    }
    assert!(matches!(
        ctc_loss(&matrix(&probs), &label(&[1, 1], 2)),
        Err(Error::Unrepresentable { required: 3, available: 2, .. })
    ));
}

#[test]
fn forward_and_backward_totals_agree() {
    let mut rng = rng(12);
    for _ in 0..40 {
        let frames = rng.gen_range(1..=30);
        let v = rng.gen_range(1..=5);
        let probs = random_probs(&mut rng, frames, v + 1);
        let y = random_label(&mut rng, frames.min(8), v, frames);
        let lp = matrix(&probs).map(f64::ln);
        let fb = forward_backward(&lp, &label(&y, v)).unwrap();
        assert!((fb.forward_log_lik - fb.backward_log_lik).abs() < 1e-10);
    }
}

fn loss_of_logits(z: &[Vec<f64>], y: &LabelSeq) -> f64 {
    let probs: Vec<Vec<f64>> = z.iter().map(|r| softmax(r)).collect();
    ctc_loss(&matrix(&probs), y).unwrap().neg_log_lik
}

#[test]
fn logit_gradient_matches_finite_differences() {
    let mut rng = rng(13);
    for _ in 0..25 {
        let frames = rng.gen_range(1..=7);
        let v = rng.gen_range(1..=4);
        let z: Vec<Vec<f64>> = (0..frames)
            .map(|_| (0..=v).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let y = label(&random_label(&mut rng, frames, v, frames), v);
        let probs: Vec<Vec<f64>> = z.iter().map(|r| softmax(r)).collect();
        let grad = ctc_loss(&matrix(&probs), &y).unwrap().logit_grad;
        let flat: Vec<f64> = z.concat();
        for i in 0..flat.len() {
            let fd = central_diff(&flat, i, 1e-5, |th| {
                let rows: Vec<Vec<f64>> = th.chunks(v + 1).map(|c| c.to_vec()).collect();
                loss_of_logits(&rows, &y)
            });
            let an = grad.as_slice()[i];
            assert!((fd - an).abs() < 1e-7, "frame {} class {}: {an} vs {fd}", i / (v + 1), i % (v + 1));
        }
    }
}

#[test]
fn zero_mass_label_has_infinite_training_loss() {
    let probs = matrix(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
    let r = ctc_from_log_probs(&probs.map(f64::ln), &label(&[1], 1)).unwrap();
    assert_eq!(r.neg_log_lik, f64::INFINITY);
    assert!(r.logit_grad.as_slice().iter().all(|g| g.is_finite()));
}

#[test]
fn marginal_matches_enumeration_and_sums_to_one() {
    let mut rng = rng(14);
    for _ in 0..20 {
        let frames = rng.gen_range(1..=5);
        let v = rng.gen_range(1..=3);
        let probs = random_probs(&mut rng, frames, v + 1);
        let m = marginal_over_labels(&matrix(&probs), frames).unwrap();
        let oracle = exhaustive_marginal(&probs);
        assert_eq!(m.len(), oracle.len());
        let total: f64 = m.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (y, p) in &m {
            assert!((p - oracle[y.symbols()]).abs() < 1e-14);
        }
        assert!(m.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_bounded_by_brute_force(
        seed in any::<u64>(),
        frames in 1usize..=5,
        v in 1usize..=3,
    ) {
        let mut rng = rng(seed);
        let probs = random_probs(&mut rng, frames, v + 1);
        let y = label(&random_label(&mut rng, frames, v, frames), v);
        let r = ctc_loss(&matrix(&probs), &y).unwrap();
        prop_assert!(r.neg_log_lik >= 0.0);
        let b = ctc_brute_force(&matrix(&probs), &y).unwrap();
        prop_assert!((r.neg_log_lik - b).abs() < 1e-9);
        // softmax - occupancy: each row of the logit gradient sums to zero
        for row in r.logit_grad.iter_rows() {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn collapse_is_idempotent_on_labels(path in proptest::collection::vec(0u32..4, 0..12)) {
        let y = collapse(&path, 4).unwrap();
        prop_assert!(!y.symbols().contains(&0));
        let again = collapse(y.symbols(), 4).unwrap();
        // collapsing a label can only merge its adjacent repeats
        prop_assert!(again.len() <= y.len());
        let expect: Vec<u32> = collapse_path(&path.iter().map(|&c| c as usize).collect::<Vec<_>>());
        prop_assert_eq!(y.symbols(), &expect[..]);
    }

    #[test]
    fn single_precision_tracks_double(seed in any::<u64>(), frames in 1usize..=6) {
        let mut rng = rng(seed);
        let probs = random_probs(&mut rng, frames, 3);
        let y = random_label(&mut rng, frames, 2, frames);
        let d = ctc_loss(&matrix(&probs), &label(&y, 2)).unwrap().neg_log_lik;
        let pf: Vec<Vec<f32>> = probs.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
        let s = ctc_loss(&egl_lab::Matrix::from_rows(&pf).unwrap(), &label(&y, 2)).unwrap().neg_log_lik;
        prop_assert!((s as f64 - d).abs() < 1e-4 * d.max(1.0));
    }
}
