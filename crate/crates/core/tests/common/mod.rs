//! Brute-force reference implementations and fixtures shared by the
//! integration tests. Nothing here calls into the library's numerics.

#![allow(dead_code)]

use mifag::data::{normalize_cloud, PointCloudSample, RgbImage};
use mifag::synth::{synth_cloud, synth_image_bytes};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type M = Vec<Vec<f64>>;

pub fn rows(t: &mifag::tensor::Tensor) -> M {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn layer_norm(x: &M, gamma: &[f64], beta: &[f64], eps: f64) -> M {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(c, v)| gamma[c] * (v - mu) / (var + eps).sqrt() + beta[c])
                .collect()
        })
        .collect()
}

pub struct MhaWeights {
    pub wq: M,
    pub wk: M,
    pub wv: M,
    pub wo: M,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub heads: usize,
}

/// Returns (pre-norm, post-norm, per-head score matrices).
pub fn mha(w: &MhaWeights, q: &M, k: &M, v: &M) -> (M, M, Vec<M>) {
    let c = q[0].len();
    let dh = c / w.heads;
    let (qp, kp, vp) = (matmul(q, &w.wq), matmul(k, &w.wk), matmul(v, &w.wv));
    let mut cat = vec![vec![0.0; c]; q.len()];
    let mut all = Vec::new();
    for h in 0..w.heads {
        let mut scores = Vec::new();
        for i in 0..q.len() {
            let mut s = vec![0.0; k.len()];
            for j in 0..k.len() {
                let mut d = 0.0;
                for t in 0..dh {
                    d += qp[i][h * dh + t] * kp[j][h * dh + t];
                }
                s[j] = d / (dh as f64).sqrt();
            }
            let a = softmax(&s);
            for t in 0..dh {
                cat[i][h * dh + t] = (0..k.len()).map(|j| a[j] * vp[j][h * dh + t]).sum();
            }
            scores.push(a);
        }
        all.push(scores);
    }
    let pre = add(q, &matmul(&cat, &w.wo));
    let post = layer_norm(&pre, &w.gamma, &w.beta, 1e-5);
    (pre, post, all)
}

/// Dense layers `(weight in×out, bias)`; ReLU after all but the last unless `relu_last`.
pub fn mlp(layers: &[(M, Vec<f64>)], x: &M, relu_last: bool) -> M {
    let mut h = x.clone();
    for (i, (w, b)) in layers.iter().enumerate() {
        h = matmul(&h, w);
        for r in &mut h {
            for (c, v) in r.iter_mut().enumerate() {
                *v += b[c];
                if i + 1 < layers.len() || relu_last {
                    *v = v.max(0.0);
                }
            }
        }
    }
    h
}

pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

/// Greedy max-min selection recomputing every distance at each step.
pub fn fps(coords: &[[f64; 3]], k: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < k {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..coords.len() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&c| dist2(&coords[i], &coords[c]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

/// Fraction of positive/negative pairs ranked correctly, ties counting half.
pub fn auc_pairs(pred: &[f64], gt: &[bool]) -> f64 {
    let mut score = 0.0;
    let mut pairs = 0.0;
    for i in 0..pred.len() {
        if !gt[i] {
            continue;
        }
        for j in 0..pred.len() {
            if gt[j] {
                continue;
            }
            pairs += 1.0;
            if pred[i] > pred[j] {
                score += 1.0;
            } else if pred[i] == pred[j] {
                score += 0.5;
            }
        }
    }
    score / pairs
}

pub fn aiou_loop(pred: &[f64], gt: &[bool]) -> f64 {
    let mut sum = 0.0;
    for k in 0..100 {
        let t = k as f64 / 100.0;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..pred.len() {
            let p = pred[i] > t;
            if p && gt[i] {
                inter += 1;
            }
            if p || gt[i] {
                union += 1;
            }
        }
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    sum / 100.0
}

pub fn focal_loop(pred: &[f64], gt: &[f64], alpha: f64, gamma: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        let (q, p) = (pred[i], gt[i]);
        s += alpha * (1.0 - q).powf(gamma) * p * q.ln() + (1.0 - alpha) * q.powf(gamma) * (1.0 - p) * (1.0 - q).ln();
    }
    -s / pred.len() as f64
}

pub fn dice_loop(pred: &[f64], gt: &[f64]) -> f64 {
    let eps = 1e-6;
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for i in 0..pred.len() {
        inter += pred[i] * gt[i];
        sp += pred[i];
        sg += gt[i];
    }
    1.0 - (2.0 * inter + eps) / (sp + sg + eps)
}

pub fn similarity_loop(snaps: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for layer in snaps {
        let n = layer.len();
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dot: f64 = layer[i].iter().zip(&layer[j]).map(|(a, b)| a * b).sum();
                let na: f64 = layer[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb: f64 = layer[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                acc += 1.0 - dot / (na * nb);
                pairs += 1.0;
            }
        }
        total += acc / pairs;
    }
    total / snaps.len() as f64
}

/// Relative error with an absolute floor, as used by every gradient check.
pub fn grad_ok(analytic: f64, numeric: f64, rel: f64, floor: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= floor || diff <= rel * analytic.abs().max(numeric.abs())
}

pub fn image_from_bytes(side: usize, bytes: &[u8]) -> RgbImage {
    RgbImage::new(side, side, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Normalised synthetic cloud plus `n` reference images, all from `seed`.
pub fn pair(seed: u64, class: usize, affordance: usize, points: usize, side: usize, n: usize) -> (PointCloudSample, Vec<RgbImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = synth_cloud(&format!("t{seed}"), class, affordance, points, &mut rng);
    let cloud = normalize_cloud(&cloud).unwrap();
    let images = (0..n)
        .map(|_| image_from_bytes(side, &synth_image_bytes(affordance, side, &mut rng)))
        .collect();
    (cloud, images)
}
