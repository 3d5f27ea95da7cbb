//! Dictionary fusion: point features query the invariant dictionary through
//! cosine attention, images are reweighted per point, the result is added
//! back onto the point features and decoded to a per-point heatmap.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoders::{FeaturePropagation, Level};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, Mlp, ParamStore};

pub const COSINE_EPS: f64 = 1e-8;

/// Cosine similarity between every row of `q` (`K × d`) and every row of
/// one dictionary slice (`M × d`).
pub fn cosine_scores(g: &mut Graph, q: Var, keys: Var) -> Var {
    let qn = g.row_normalize(q, COSINE_EPS);
    let kn = g.row_normalize(keys, COSINE_EPS);
    g.matmul_nt(qn, kn)
}

#[derive(Clone, Debug)]
pub struct IqdcaOut {
    /// `P_q[i]`, `K × d` per image.
    pub weighted: Vec<Var>,
    /// `A[i]`, `K × M` per image, rows summing to one.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Adm {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub gate: Linear,
    pub proj: Linear,
    pub scale: f64,
    pub dim: usize,
}

impl Adm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        point_dim: usize,
        dict_dim: usize,
        dim: usize,
        scale: f64,
    ) -> Self {
        Self {
            query: Linear::new(store, rng, "adm.query", point_dim, dim, false, 1.0),
            key: Linear::new(store, rng, "adm.key", dict_dim, dim, false, 1.0),
            value: Linear::new(store, rng, "adm.value", dict_dim, dim, false, 1.0),
            gate: Linear::new(store, rng, "adm.gate", dim, 1, false, 1.0),
            proj: Linear::new(store, rng, "adm.proj", dim, point_dim, true, 1.0),
            scale,
            dim,
        }
    }

    pub fn iqdca(&self, g: &mut Graph, p: &Bound, points: Var, dictionary: &[Var]) -> Result<IqdcaOut> {
        if dictionary.is_empty() {
            return Err(Error::Shape("empty dictionary".into()));
        }
        let q = self.query.forward(g, p, points);
        let mut out = IqdcaOut {
            weighted: Vec::with_capacity(dictionary.len()),
            attention: Vec::with_capacity(dictionary.len()),
        };
        for &d in dictionary {
            let k = self.key.forward(g, p, d);
            let v = self.value.forward(g, p, d);
            let s = cosine_scores(g, q, k);
            let s = g.scale(s, self.scale);
            let a = g.softmax_rows(s);
            out.weighted.push(g.matmul(a, v));
            out.attention.push(a);
        }
        Ok(out)
    }

    /// Per-point softmax over images of a learned score, scaled by `n` so
    /// uniform weights leave the input unchanged.
    pub fn self_weighted_attention(&self, g: &mut Graph, p: &Bound, weighted: &[Var]) -> (Vec<Var>, Var) {
        let n = weighted.len();
        let scores: Vec<Var> = weighted.iter().map(|&x| self.gate.forward(g, p, x)).collect();
        let cat = g.concat_cols(&scores);
        let w = g.softmax_rows(cat);
        let mixed = weighted
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let wi = g.slice_cols(w, i, 1);
                let y = g.mul_col(x, wi);
                g.scale(y, n as f64)
            })
            .collect();
        (mixed, w)
    }

    /// `P_out = P_in + proj(mean_i P_mix[i])`.
    pub fn fuse(&self, g: &mut Graph, p: &Bound, mixed: &[Var], points: Var) -> Var {
        let mean = g.mean_n(mixed);
        let y = self.proj.forward(g, p, mean);
        g.add(points, y)
    }
}

/// Feature propagation back to the full cloud plus a per-point head with a
/// sigmoid output.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub propagation: FeaturePropagation,
    pub head: Mlp,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        level_dims: &[usize],
        deep_dim: usize,
        widths: &[Vec<usize>],
    ) -> Self {
        let propagation = FeaturePropagation::new(store, rng, "decoder", level_dims, deep_dim, widths);
        let c = propagation.out_dim();
        let head = Mlp::new(store, rng, "decoder.head", c, &[c / 2, 1], false);
        Self { propagation, head }
    }

    /// Returns `N × 1` probabilities and the pre-sigmoid logits.
    pub fn decode(&self, g: &mut Graph, p: &Bound, fused: Var, levels: &[Level]) -> Result<(Var, Var)> {
        let h = self.propagation.forward(g, p, levels, fused)?;
        let logits = self.head.forward(g, p, h);
        Ok((g.sigmoid(logits), logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn adm(dim: usize) -> (Adm, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Adm::new(&mut store, &mut rng, dim, dim, dim, 10.0);
        (a, store)
    }

    #[test]
    fn cosine_self_and_orthogonal() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0]]));
        let k = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 2.0]]));
        let s = cosine_scores(&mut g, q, k);
        let s = g.value(s);
        assert!((s.get(0, 0) - 1.0).abs() < 1e-8);
        assert_eq!(s.get(1, 1), 0.0);
    }

    #[test]
    fn single_token_dictionary_passes_value_through() {
        let (a, store) = adm(3);
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let pts = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 2.0]]));
        let d = g.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]));
        let out = a.iqdca(&mut g, &p, pts, &[d]).unwrap();
        let v = g.value(d).matmul(store.get(a.value.weight));
        let pq = g.value(out.weighted[0]);
        for r in 0..2 {
            for c in 0..3 {
                assert!((pq.get(r, c) - v.get(0, c)).abs() < 1e-15);
            }
        }
        assert!(g.value(out.attention[0]).data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn swa_single_image_is_identity() {
        let (a, store) = adm(3);
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 0.25], vec![0.5, 0.0, 3.0]]));
        let (mixed, _) = a.self_weighted_attention(&mut g, &p, &[x]);
        assert_eq!(g.value(mixed[0]), g.value(x));
    }

    #[test]
    fn fuse_zero_mix_is_residual() {
        let (a, store) = adm(2);
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let pts = g.constant(Tensor::from_rows(&[vec![0.7, -0.1]]));
        let z = g.constant(Tensor::zeros(1, 2));
        let out = a.fuse(&mut g, &p, &[z, z], pts);
        assert_eq!(g.value(out), g.value(pts));
    }
}
