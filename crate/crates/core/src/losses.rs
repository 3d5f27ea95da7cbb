//! Training objective: affordance cross-entropy, per-layer cross-image
//! cosine similarity, and a focal + dice heatmap term.
//!
//! Each loss is a plain function returning its value and the gradient with
//! respect to its inputs; [`attach`] wires them into a graph as one node.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;
pub const PRED_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sim: f64,
    pub focal: f64,
    pub dice: f64,
    pub hm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.sim, self.focal, self.dice, self.hm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Unweighted mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.ce += b.ce;
            m.sim += b.sim;
            m.focal += b.focal;
            m.dice += b.dice;
            m.hm += b.hm;
            m.total += b.total;
        }
        m.ce /= n;
        m.sim /= n;
        m.focal /= n;
        m.dice /= n;
        m.hm /= n;
        m.total /= n;
        m
    }
}

/// `−log softmax(logits)[target]` and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    assert!(target < logits.len(), "target {target} out of range");
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    let lse = m + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (z - lse).exp() - if i == target { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[target], grad)
}

static WARNED_SINGLE_IMAGE: AtomicBool = AtomicBool::new(false);

/// Mean over layers of the mean over image pairs of `1 − cos(F_i, F_j)`,
/// each feature map flattened to one vector.
///
/// `snapshots[l][i]` is image `i` at layer `l`. Returns zero (and warns
/// once) when there is a single image.
pub fn similarity_loss(snapshots: &[Vec<Tensor>]) -> (f64, Vec<Vec<Tensor>>) {
    let mut grads: Vec<Vec<Tensor>> = snapshots
        .iter()
        .map(|l| l.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect())
        .collect();
    let n = snapshots.first().map_or(0, Vec::len);
    if snapshots.is_empty() || n < 2 {
        if !WARNED_SINGLE_IMAGE.swap(true, Ordering::Relaxed) {
            log::warn!("similarity loss needs at least two images; using 0");
        }
        return (0.0, grads);
    }
    let layers = snapshots.len() as f64;
    let pairs = (n * (n - 1) / 2) as f64;
    let mut total = 0.0;
    for (layer, lgrad) in snapshots.iter().zip(&mut grads) {
        let norms: Vec<f64> = layer.iter().map(|t| dot(t.data(), t.data()).sqrt()).collect();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (layer[i].data(), layer[j].data());
                let (na, nb) = (norms[i], norms[j]);
                if na == 0.0 || nb == 0.0 {
                    total += 1.0;
                    continue;
                }
                let c = dot(a, b) / (na * nb);
                total += 1.0 - c;
                let w = -1.0 / (pairs * layers);
                // d cos / d a = b/(|a||b|) − c·a/|a|²
                for (k, g) in lgrad[i].data_mut().iter_mut().enumerate() {
                    *g += w * (b[k] / (na * nb) - c * a[k] / (na * na));
                }
                for (k, g) in lgrad[j].data_mut().iter_mut().enumerate() {
                    *g += w * (a[k] / (na * nb) - c * b[k] / (nb * nb));
                }
            }
        }
    }
    (total / (pairs * layers), grads)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean focal loss with predictions clamped to `[1e-12, 1 − 1e-12]`.
pub fn focal_loss(pred: &[f64], gt: &[f64], params: FocalParams) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), gt.len());
    let n = pred.len().max(1) as f64;
    let FocalParams { alpha, gamma } = params;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&raw, &p)| {
            let q = raw.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            let (lq, l1q) = (q.ln(), (1.0 - q).ln());
            let pos = alpha * (1.0 - q).powf(gamma) * p * lq;
            let neg = (1.0 - alpha) * q.powf(gamma) * (1.0 - p) * l1q;
            total += pos + neg;
            if raw != q {
                return 0.0;
            }
            let dpos = alpha * p * (-gamma * (1.0 - q).powf(gamma - 1.0) * lq + (1.0 - q).powf(gamma) / q);
            let dneg = (1.0 - alpha) * (1.0 - p) * (gamma * q.powf(gamma - 1.0) * l1q - q.powf(gamma) / (1.0 - q));
            -(dpos + dneg) / n
        })
        .collect();
    (-total / n, grad)
}

/// `1 − (2Σp̂p + ε)/(Σp̂ + Σp + ε)`.
pub fn dice_loss(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), gt.len());
    let inter: f64 = dot(pred, gt);
    let s: f64 = pred.iter().sum::<f64>() + gt.iter().sum::<f64>();
    let num = 2.0 * inter + DICE_EPS;
    let den = s + DICE_EPS;
    let grad = gt.iter().map(|&p| -(2.0 * p * den - num) / (den * den)).collect();
    (1.0 - num / den, grad)
}

/// Returns `(focal, dice, focal + dice)` and the gradient of the sum.
pub fn heatmap_loss(pred: &[f64], gt: &[f64], params: FocalParams) -> ((f64, f64, f64), Vec<f64>) {
    let (f, gf) = focal_loss(pred, gt, params);
    let (d, gd) = dice_loss(pred, gt);
    let g = gf.iter().zip(&gd).map(|(a, b)| a + b).collect();
    ((f, d, f + d), g)
}

/// Gradients of the weighted total with respect to each input.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub logits: Vec<f64>,
    pub snapshots: Vec<Vec<Tensor>>,
    pub pred: Vec<f64>,
}

pub fn total_loss(
    logits: &[f64],
    target: usize,
    snapshots: &[Vec<Tensor>],
    pred: &[f64],
    gt: &[f64],
    weights: LossWeights,
    focal: FocalParams,
) -> (LossBreakdown, LossGradients) {
    let (ce, gce) = cross_entropy(logits, target);
    let (sim, gsim) = similarity_loss(snapshots);
    let ((f, d, hm), ghm) = heatmap_loss(pred, gt, focal);
    let LossWeights { lambda1, lambda2, lambda3 } = weights;
    let breakdown = LossBreakdown {
        ce,
        sim,
        focal: f,
        dice: d,
        hm,
        total: lambda1 * ce + lambda2 * sim + lambda3 * hm,
    };
    let grads = LossGradients {
        logits: gce.into_iter().map(|g| lambda1 * g).collect(),
        snapshots: gsim
            .into_iter()
            .map(|l| l.into_iter().map(|t| t.map(|g| lambda2 * g)).collect())
            .collect(),
        pred: ghm.into_iter().map(|g| lambda3 * g).collect(),
    };
    (breakdown, grads)
}

/// Adds the weighted total to `g` as a scalar node over `logits` (`1 × 17`),
/// every snapshot and `pred` (`N × 1`).
#[allow(clippy::too_many_arguments)]
pub fn attach(
    g: &mut Graph,
    logits: Var,
    target: usize,
    snapshots: &[Vec<Var>],
    pred: Var,
    gt: &[f64],
    weights: LossWeights,
    focal: FocalParams,
) -> (Var, LossBreakdown) {
    let snap_values: Vec<Vec<Tensor>> = snapshots
        .iter()
        .map(|l| l.iter().map(|&v| g.value(v).clone()).collect())
        .collect();
    let logit_values = g.value(logits).data().to_vec();
    let pred_values = g.value(pred).data().to_vec();
    let (breakdown, grads) = total_loss(&logit_values, target, &snap_values, &pred_values, gt, weights, focal);
    let mut inputs = vec![logits];
    let mut local = vec![Tensor::from_vec(1, grads.logits.len(), grads.logits)];
    for (vars, tensors) in snapshots.iter().zip(grads.snapshots) {
        inputs.extend(vars);
        local.extend(tensors);
    }
    inputs.push(pred);
    local.push(Tensor::from_vec(pred_values.len(), 1, grads.pred));
    let node = g.custom_scalar(&inputs, breakdown.total, local);
    (node, breakdown)
}
