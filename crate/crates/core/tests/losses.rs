mod common;

use mifag::losses::{
    cross_entropy, dice_loss, focal_loss, heatmap_loss, similarity_loss, total_loss, FocalParams, LossWeights,
};
use mifag::nn::normal_tensor;
use mifag::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cross_entropy_cases() {
    assert!((cross_entropy(&[0.0; 17], 0).0 - 2.833213).abs() < 1e-6);
    let mut l = [0.0; 17];
    l[5] = 1000.0;
    assert!(cross_entropy(&l, 5).0.abs() < 1e-12);
    assert!((cross_entropy(&[1.0, 2.0, 3.0], 2).0 - 0.40760596).abs() < 1e-6);
    let lse = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
    assert!((cross_entropy(&[1.0, 2.0, 3.0], 2).0 - (lse - 3.0)).abs() < 1e-15);
}

#[test]
fn similarity_limits() {
    let same = Tensor::from_vec(2, 2, vec![0.3, -1.0, 2.0, 0.5]);
    let snaps = vec![vec![same.clone(), same.clone()], vec![same.clone(), same.clone()]];
    assert!(similarity_loss(&snaps).0.abs() < 1e-15);
    let a = Tensor::from_vec(1, 3, vec![1.0, 0.0, 2.0]);
    let b = Tensor::from_vec(1, 3, vec![0.0, 5.0, 0.0]);
    assert!((similarity_loss(&[vec![a, b]]).0 - 1.0).abs() < 1e-12);
}

#[test]
fn similarity_matches_pair_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let snaps: Vec<Vec<Tensor>> = (0..2).map(|_| (0..3).map(|_| normal_tensor(&mut rng, 4, 5, 1.0)).collect()).collect();
    let flat: Vec<Vec<Vec<f64>>> = snaps.iter().map(|l| l.iter().map(|t| t.data().to_vec()).collect()).collect();
    assert!((similarity_loss(&snaps).0 - common::similarity_loop(&flat)).abs() < 1e-12);
}

#[test]
fn focal_hand_value() {
    // 0.25·0.25·0.5·ln2 + 0.75·0.25·0.5·ln2 = 0.125·ln2
    let (v, _) = focal_loss(&[0.5], &[0.5], FocalParams::default());
    assert!((v - 0.125 * 2f64.ln()).abs() < 1e-15);
    assert!((v - 0.0866434).abs() < 1e-7);
}

#[test]
fn focal_matches_loop_oracle() {
    let pred = [0.2, 0.77, 0.5];
    let gt = [0.0, 1.0, 0.3];
    let (v, _) = focal_loss(&pred, &gt, FocalParams::default());
    assert!((v - common::focal_loop(&pred, &gt, 0.25, 2.0)).abs() < 1e-12);
    let (v, _) = focal_loss(&pred, &gt, FocalParams { alpha: 0.6, gamma: 1.5 });
    assert!((v - common::focal_loop(&pred, &gt, 0.6, 1.5)).abs() < 1e-12);
}

#[test]
fn focal_vanishes_at_exact_binary_predictions() {
    let (v, _) = focal_loss(&[0.0, 1.0, 1.0], &[0.0, 1.0, 1.0], FocalParams::default());
    assert!(v.abs() < 1e-20);
}

#[test]
fn dice_cases() {
    assert!(dice_loss(&[1.0; 4], &[1.0; 4]).0.abs() < 1e-15);
    let (v, _) = dice_loss(&[0.0; 4], &[1.0; 4]);
    assert!((v - (1.0 - 1e-6 / (4.0 + 1e-6))).abs() < 1e-15);
    let (v, _) = dice_loss(&[0.5, 0.5], &[1.0, 0.0]);
    assert!((v - 0.5).abs() < 1e-6);
    assert!((v - common::dice_loop(&[0.5, 0.5], &[1.0, 0.0])).abs() < 1e-15);
}

#[test]
fn heatmap_is_sum_of_parts() {
    let pred = [0.1, 0.9, 0.4, 0.66];
    let gt = [0.0, 1.0, 0.2, 1.0];
    let ((f, d, hm), _) = heatmap_loss(&pred, &gt, FocalParams::default());
    assert_eq!(hm, f + d);
    assert!((f - common::focal_loop(&pred, &gt, 0.25, 2.0)).abs() < 1e-12);
    assert!((d - common::dice_loop(&pred, &gt)).abs() < 1e-12);
    let ((_, _, hm), _) = heatmap_loss(&[1.0, 0.0], &[1.0, 0.0], FocalParams::default());
    assert!(hm.abs() < 1e-6);
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, usize, Vec<Vec<Tensor>>, Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = (0..17).map(|_| rng.random_range(-3.0..3.0)).collect();
    let target = rng.random_range(0..17);
    let snaps = (0..2).map(|_| (0..3).map(|_| normal_tensor(rng, 2, 3, 1.0)).collect()).collect();
    let pred: Vec<f64> = (0..6).map(|_| rng.random_range(0.05..0.95)).collect();
    let gt: Vec<f64> = (0..6).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..1.0) } else { 0.0 }).collect();
    (logits, target, snaps, pred, gt)
}

#[test]
fn total_recomposes_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (logits, target, snaps, pred, gt) = random_case(&mut rng);
    let w = LossWeights::default();
    let (b, _) = total_loss(&logits, target, &snaps, &pred, &gt, w, FocalParams::default());
    assert!((b.total - (1.0 * b.ce + 0.5 * b.sim + 1.0 * b.hm)).abs() < 1e-12);
    let only = |l1, l2, l3| total_loss(&logits, target, &snaps, &pred, &gt, LossWeights { lambda1: l1, lambda2: l2, lambda3: l3 }, FocalParams::default()).0;
    assert_eq!(only(0.0, 0.0, 1.0).total, b.hm);
    assert_eq!(only(1.0, 0.0, 0.0).total, b.ce);
}

/// Central differences with step 1e-5 against the returned gradients, on 20 random cases.
#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-5;
    let ok = |a: f64, n: f64| common::grad_ok(a, n, 1e-4, 1e-8);
    for _ in 0..20 {
        let (logits, target, snaps, pred, gt) = random_case(&mut rng);
        let (_, g) = cross_entropy(&logits, target);
        for i in 0..logits.len() {
            let (mut up, mut dn) = (logits.clone(), logits.clone());
            up[i] += h;
            dn[i] -= h;
            let n = (cross_entropy(&up, target).0 - cross_entropy(&dn, target).0) / (2.0 * h);
            assert!(ok(g[i], n), "ce {i}: {} vs {n}", g[i]);
        }
        let (_, gs) = similarity_loss(&snaps);
        for l in 0..snaps.len() {
            for i in 0..snaps[l].len() {
                for k in 0..snaps[l][i].len() {
                    let mut up = snaps.clone();
                    up[l][i].data_mut()[k] += h;
                    let mut dn = snaps.clone();
                    dn[l][i].data_mut()[k] -= h;
                    let n = (similarity_loss(&up).0 - similarity_loss(&dn).0) / (2.0 * h);
                    assert!(ok(gs[l][i].data()[k], n), "sim {l} {i} {k}");
                }
            }
        }
        let f = FocalParams::default();
        let (_, gf) = focal_loss(&pred, &gt, f);
        let (_, gd) = dice_loss(&pred, &gt);
        for i in 0..pred.len() {
            let (mut up, mut dn) = (pred.clone(), pred.clone());
            up[i] += h;
            dn[i] -= h;
            let nf = (focal_loss(&up, &gt, f).0 - focal_loss(&dn, &gt, f).0) / (2.0 * h);
            let nd = (dice_loss(&up, &gt).0 - dice_loss(&dn, &gt).0) / (2.0 * h);
            assert!(ok(gf[i], nf), "focal {i}: {} vs {nf}", gf[i]);
            assert!(ok(gd[i], nd), "dice {i}: {} vs {nd}", gd[i]);
        }
    }
}

proptest! {
    #[test]
    fn losses_are_nonnegative_and_bounded(
        pred in prop::collection::vec(0.001f64..0.999, 1..30),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<f64> = pred.iter().map(|_| if rng.random_bool(0.4) { rng.random_range(0.0..=1.0) } else { 0.0 }).collect();
        let (f, _) = focal_loss(&pred, &gt, FocalParams::default());
        let (d, _) = dice_loss(&pred, &gt);
        prop_assert!(f >= 0.0 && f.is_finite());
        prop_assert!((0.0..1.0).contains(&d));
        let snaps: Vec<Vec<Tensor>> = (0..2).map(|_| (0..3).map(|_| normal_tensor(&mut rng, 2, 2, 1.0)).collect()).collect();
        let (s, _) = similarity_loss(&snaps);
        prop_assert!((0.0..=2.0).contains(&s));
    }

    #[test]
    fn similarity_is_permutation_symmetric(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snaps: Vec<Vec<Tensor>> = (0..3).map(|_| (0..3).map(|_| normal_tensor(&mut rng, 2, 2, 1.0)).collect()).collect();
        let base = similarity_loss(&snaps).0;
        let images: Vec<Vec<Tensor>> = snaps.iter().map(|l| vec![l[2].clone(), l[0].clone(), l[1].clone()]).collect();
        let layers = vec![snaps[1].clone(), snaps[2].clone(), snaps[0].clone()];
        prop_assert!((similarity_loss(&images).0 - base).abs() < 1e-12);
        prop_assert!((similarity_loss(&layers).0 - base).abs() < 1e-12);
    }

    #[test]
    fn total_is_linear_in_each_weight(l1 in 0.0f64..3.0, l2 in 0.0f64..3.0, l3 in 0.0f64..3.0, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (logits, target, snaps, pred, gt) = random_case(&mut rng);
        let w = LossWeights { lambda1: l1, lambda2: l2, lambda3: l3 };
        let (b, _) = total_loss(&logits, target, &snaps, &pred, &gt, w, FocalParams::default());
        prop_assert_eq!(b.total, l1 * b.ce + l2 * b.sim + l3 * b.hm);
    }
}
