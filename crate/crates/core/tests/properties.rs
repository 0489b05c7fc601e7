use ipsinet::loss::{focal_loss, focal_loss_gradient, softmax, FocalLossParams};
use ipsinet::metrics::{auc_roc, auc_trapezoid, macro_f1, report};
use proptest::prelude::*;

/// Counts every (positive, negative) pair directly.
fn brute_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn brute_macro_f1(preds: &[usize], labels: &[usize]) -> f64 {
    let f1 = |c: usize| {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l == c)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p == c && l != c)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|&(&p, &l)| p != c && l == c)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    };
    (f1(0) + f1(1)) / 2.0
}

/// Labels with both classes present, scores on a coarse dyadic grid so ties
/// are common and `1 - s` is exact.
fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<usize>)> {
    (2usize..=200).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..=64).prop_map(|k| f64::from(k) / 64.0), n),
            prop::collection::vec(0usize..2, n),
            prop::collection::vec(0usize..2, n),
        )
            .prop_filter("both classes", |(_, labels, _)| {
                labels.contains(&0) && labels.contains(&1)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auc_matches_all_pairs_oracle((scores, labels, _) in instance()) {
        let expected = brute_auc(&scores, &labels);
        prop_assert!((auc_roc(&scores, &labels).unwrap() - expected).abs() <= 1e-12);
        prop_assert!((auc_trapezoid(&scores, &labels).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn auc_complement_is_exact((scores, labels, _) in instance()) {
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        prop_assert_eq!(auc_roc(&scores, &labels).unwrap() + auc_roc(&flipped, &labels).unwrap(), 1.0);
    }

    #[test]
    fn macro_f1_matches_counting_oracle((_, labels, preds) in instance()) {
        let got = macro_f1(&preds, &labels).unwrap();
        prop_assert!((got - brute_macro_f1(&preds, &labels)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn report_is_invariant_under_duplication((scores, labels, preds) in instance()) {
        let twice = |v: &[usize]| [v, v].concat();
        let a = report(&preds, &scores, &labels).unwrap();
        let b = report(&twice(&preds), &[scores.clone(), scores.clone()].concat(), &twice(&labels)).unwrap();
        prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-12);
        prop_assert!((a.auc_roc.unwrap() - b.auc_roc.unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn focal_loss_is_nonnegative_and_decreasing_in_gamma(
        z0 in -20.0f64..20.0,
        z1 in -20.0f64..20.0,
        target in 0usize..2,
        a in 0.01f64..1.0,
        g in 0.0f64..5.0,
        dg in 0.01f64..3.0,
    ) {
        let params = |gamma| FocalLossParams { gamma, alpha: vec![a, a] };
        let lo = focal_loss(&[z0, z1], target, &params(g)).unwrap();
        let hi = focal_loss(&[z0, z1], target, &params(g + dg)).unwrap();
        prop_assert!(lo >= 0.0 && hi >= 0.0);
        prop_assert!(hi <= lo);
    }

    #[test]
    fn focal_gradient_sums_to_zero(z0 in -30.0f64..30.0, z1 in -30.0f64..30.0, target in 0usize..2, g in 0.0f64..5.0) {
        let grad = focal_loss_gradient(&[z0, z1], target, &FocalLossParams { gamma: g, alpha: vec![0.3, 0.7] }).unwrap();
        prop_assert!((grad[0] + grad[1]).abs() <= 1e-12);
    }
}

#[test]
fn focal_loss_reduces_to_cross_entropy() {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut uniform = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let ce = FocalLossParams::cross_entropy(2);
    for _ in 0..1000 {
        let z = [uniform() * 20.0 - 10.0, uniform() * 20.0 - 10.0];
        let t = usize::from(uniform() < 0.5);
        // Log-sum-exp reference.
        let m = z[0].max(z[1]);
        let reference = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[t];
        assert!((focal_loss(&z, t, &ce).unwrap() - reference).abs() <= 1e-10);
        let p = softmax(&z);
        let g = focal_loss_gradient(&z, t, &ce).unwrap();
        for j in 0..2 {
            let onehot = if j == t { 1.0 } else { 0.0 };
            assert!((g[j] - (p[j] - onehot)).abs() <= 1e-12);
        }
    }
}
