mod common;

use mifag::metrics::{aiou, auc, binarize_gt, mae, sim_metric, MetricsReport, SampleMetrics};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tied_case(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let pred: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.3) { rng.random_range(0..10) as f64 / 10.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    let mut gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    gt[0] = true;
    gt[1] = false;
    (pred, gt)
}

#[test]
fn auc_equals_pair_counting_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let (pred, gt) = tied_case(&mut rng, 2048);
        let a = auc(&pred, &gt).unwrap();
        assert!((a - common::auc_pairs(&pred, &gt)).abs() < 1e-9);
    }
}

#[test]
fn auc_hand_case() {
    let gt = [false, false, true, true];
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &gt), Some(0.75));
    assert_eq!(common::auc_pairs(&[0.1, 0.4, 0.35, 0.8], &gt), 0.75);
}

#[test]
fn aiou_half_case() {
    let gt: Vec<bool> = (0..10).map(|i| i < 5).collect();
    assert_eq!(aiou(&[0.5; 10], &gt), 0.25);
}

#[test]
fn sim_and_mae_hand_cases() {
    assert_eq!(sim_metric(&[0.5, 0.5], &[1.0, 0.0]), 0.5);
    assert_eq!(sim_metric(&[1.0, 1.0], &[3.0, 0.0]), 0.5);
    let pred = [0.2, 0.5, 0.9, 0.0];
    let gt = [0.1, 0.5, 1.0, 0.3];
    let want = (0.1f64 + 0.0 + 0.1 + 0.3) / 4.0;
    assert!((mae(&pred, &gt) - want).abs() < 1e-15);
    let shifted: Vec<f64> = gt.iter().map(|g| g + 0.1).collect();
    assert!((mae(&shifted, &gt) - 0.1).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aiou_equals_loop_oracle(seed in 0u64..100_000, n in 1usize..300) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { rng.random_range(0..100) as f64 / 100.0 } else { rng.random_range(0.0..1.0) }).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        prop_assert_eq!(aiou(&pred, &gt), common::aiou_loop(&pred, &gt));
    }

    #[test]
    fn auc_invariant_under_increasing_transform(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = tied_case(&mut rng, 200);
        let warped: Vec<f64> = pred.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
        let (a, b) = (auc(&pred, &gt).unwrap(), auc(&warped, &gt).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn sim_is_symmetric_and_bounded(a in prop::collection::vec(0.0f64..1.0, 1..50), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(0.0..1.0)).collect();
        prop_assume!(a.iter().sum::<f64>() > 0.0);
        let (x, y) = (sim_metric(&a, &b), sim_metric(&b, &a));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&x));
    }

    #[test]
    fn mae_detects_translation(gt in prop::collection::vec(0.0f64..1.0, 1..40), c in 0.0f64..2.0) {
        let pred: Vec<f64> = gt.iter().map(|g| g + 0.05).collect();
        let moved: Vec<f64> = pred.iter().map(|p| p + c).collect();
        prop_assert!((mae(&moved, &gt) - (mae(&pred, &gt) + c)).abs() < 1e-9);
    }
}

#[test]
fn single_sample_report_equals_sample() {
    let s = SampleMetrics::compute("x", 4, &[0.9, 0.2, 0.7, 0.1], &[1.0, 0.0, 0.4, 0.0], false);
    let r = MetricsReport::from_samples("seen", vec![s.clone()]);
    assert_eq!(r.overall.auc, s.auc);
    assert_eq!(r.overall.aiou, Some(s.aiou));
    assert_eq!(r.overall.sim, Some(s.sim));
    assert_eq!(r.overall.mae, Some(s.mae));
    assert_eq!(r.per_affordance[4].means.samples, 1);
    assert!(s.aiou <= 100.0 && s.aiou >= 0.0);
}

#[test]
fn undefined_auc_is_excluded_from_mean_only() {
    let a = SampleMetrics::compute("a", 0, &[0.9, 0.2], &[1.0, 0.0], false);
    let b = SampleMetrics::compute("b", 0, &[0.9, 0.2], &[0.0, 0.0], false);
    assert_eq!(binarize_gt(&[0.0, 0.0]), vec![false, false]);
    assert!(b.auc.is_none());
    let r = MetricsReport::from_samples("seen", vec![a.clone(), b.clone()]);
    assert_eq!(r.overall.auc_samples, 1);
    assert_eq!(r.overall.auc, a.auc);
    assert_eq!(r.overall.mae, Some((a.mae + b.mae) / 2.0));
}
