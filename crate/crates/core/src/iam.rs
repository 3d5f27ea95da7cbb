//! Invariant affordance knowledge extraction.
//!
//! Learnable query tokens and per-image features refine each other over `L`
//! layers. The final queries of every image form the dictionary consumed by
//! the fusion module.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::NUM_AFFORDANCES;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Multi-head attention block with no-bias projections, a residual
/// connection and a trailing layer norm.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm: LayerNorm,
    pub heads: usize,
    pub dim: usize,
}

/// Graph handles produced by one attention call.
#[derive(Clone, Debug)]
pub struct AttentionOut {
    pub output: Var,
    pub pre_norm: Var,
    /// One row-stochastic `T_q × T_k` matrix per head.
    pub scores: Vec<Var>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let mut w = |suffix: &str| store.add(format!("{name}.{suffix}"), normal_tensor(rng, dim, dim, std));
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        Self {
            wq,
            wk,
            wv,
            wo,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, q: Var, k: Var, v: Var) -> Result<AttentionOut> {
        multi_head_attention(g, p, self, q, k, v)
    }
}

pub fn multi_head_attention(g: &mut Graph, p: &Bound, a: &Attention, q: Var, k: Var, v: Var) -> Result<AttentionOut> {
    let c = a.dim;
    if a.heads == 0 || c % a.heads != 0 {
        return Err(Error::Shape(format!("dimension {c} not divisible by {} heads", a.heads)));
    }
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.1 != c || ks.1 != c || vs.1 != c || ks.0 != vs.0 {
        return Err(Error::Shape(format!(
            "attention inputs {qs:?}, {ks:?}, {vs:?} do not match width {c}"
        )));
    }
    let dh = c / a.heads;
    let qp = g.matmul(q, p.var(a.wq));
    let kp = g.matmul(k, p.var(a.wk));
    let vp = g.matmul(v, p.var(a.wv));
    let mut outs = Vec::with_capacity(a.heads);
    let mut scores = Vec::with_capacity(a.heads);
    for h in 0..a.heads {
        let qh = g.slice_cols(qp, h * dh, dh);
        let kh = g.slice_cols(kp, h * dh, dh);
        let vh = g.slice_cols(vp, h * dh, dh);
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(s);
        outs.push(g.matmul(attn, vh));
        scores.push(attn);
    }
    let cat = g.concat_cols(&outs);
    let proj = g.matmul(cat, p.var(a.wo));
    let pre_norm = g.add(q, proj);
    let output = a.norm.forward(g, p, pre_norm);
    Ok(AttentionOut {
        output,
        pre_norm,
        scores,
    })
}

/// Image-axis mean followed by a per-token `C → C → C` MLP.
pub fn aggregate_queries(g: &mut Graph, p: &Bound, mlp: &Mlp, queries: &[Var]) -> Result<Var> {
    if queries.is_empty() {
        return Err(Error::Shape("aggregation needs at least one query set".into()));
    }
    let mean = g.mean_n(queries);
    Ok(mlp.forward(g, p, mean))
}

#[derive(Clone, Debug)]
pub struct IamLayer {
    pub query_cross: Attention,
    pub aggregate: Mlp,
    pub image_self: Attention,
    pub image_cross: Attention,
}

#[derive(Clone, Debug)]
pub struct LayerOut {
    pub queries: Vec<Var>,
    pub features: Vec<Var>,
    pub fused: Var,
    pub scores: Vec<Var>,
}

impl IamLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query_cross: Attention::new(store, rng, &format!("{name}.query_cross"), dim, heads),
            aggregate: Mlp::new(store, rng, &format!("{name}.aggregate"), dim, &[dim, dim], false),
            image_self: Attention::new(store, rng, &format!("{name}.image_self"), dim, heads),
            image_cross: Attention::new(store, rng, &format!("{name}.image_cross"), dim, heads),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, queries: &[Var], features: &[Var]) -> Result<LayerOut> {
        if queries.len() != features.len() {
            return Err(Error::Shape(format!(
                "{} query sets for {} images",
                queries.len(),
                features.len()
            )));
        }
        let mut scores = Vec::new();
        let mut next_q = Vec::with_capacity(queries.len());
        for (&q, &f) in queries.iter().zip(features) {
            let out = self.query_cross.forward(g, p, q, f, f)?;
            scores.extend(out.scores);
            next_q.push(out.output);
        }
        let fused = aggregate_queries(g, p, &self.aggregate, &next_q)?;
        let mut next_f = Vec::with_capacity(features.len());
        for &f in features {
            let sa = self.image_self.forward(g, p, f, f, f)?;
            scores.extend(sa.scores);
            let ca = self.image_cross.forward(g, p, sa.output, fused, fused)?;
            scores.extend(ca.scores);
            next_f.push(ca.output);
        }
        Ok(LayerOut {
            queries: next_q,
            features: next_f,
            fused,
            scores,
        })
    }
}

#[derive(Clone, Debug)]
pub struct IamOutput {
    /// Final query set per image; stacked they form the `n × M × C` dictionary.
    pub dictionary: Vec<Var>,
    /// `snapshots[l][i]` is image `i`'s features after layer `l + 1`.
    pub snapshots: Vec<Vec<Var>>,
    /// `queries[l][i]` is image `i`'s query set after layer `l + 1`.
    pub queries: Vec<Vec<Var>>,
    pub features: Vec<Var>,
    pub scores: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Iam {
    pub initial_queries: ParamId,
    pub image_proj: Option<Linear>,
    pub layers: Vec<IamLayer>,
    pub classifier: Linear,
    pub tokens: usize,
    pub dim: usize,
}

impl Iam {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        image_dim: usize,
        dim: usize,
        tokens: usize,
        layers: usize,
        heads: usize,
    ) -> Self {
        let initial_queries = store.add("iam.queries", normal_tensor(rng, tokens, dim, 0.02));
        let image_proj = (image_dim != dim).then(|| Linear::new(store, rng, "image_proj", image_dim, dim, true, 1.0));
        let layers = (0..layers)
            .map(|l| IamLayer::new(store, rng, &format!("iam.layer{l}"), dim, heads))
            .collect();
        let classifier = Linear::new(store, rng, "classifier", dim, NUM_AFFORDANCES, true, 1.0);
        Self {
            initial_queries,
            image_proj,
            layers,
            classifier,
            tokens,
            dim,
        }
    }

    /// `images` are `T × D` token matrices, one per reference image.
    pub fn run(&self, g: &mut Graph, p: &Bound, images: &[Var]) -> Result<IamOutput> {
        if images.is_empty() {
            return Err(Error::Shape("at least one reference image is required".into()));
        }
        let mut features: Vec<Var> = match &self.image_proj {
            Some(proj) => images.iter().map(|&f| proj.forward(g, p, f)).collect(),
            None => images.to_vec(),
        };
        let q0 = p.var(self.initial_queries);
        let mut queries = vec![q0; images.len()];
        let mut out = IamOutput {
            dictionary: Vec::new(),
            snapshots: Vec::with_capacity(self.layers.len()),
            queries: Vec::with_capacity(self.layers.len()),
            features: Vec::new(),
            scores: Vec::new(),
        };
        for layer in &self.layers {
            let lo = layer.forward(g, p, &queries, &features)?;
            queries = lo.queries;
            features = lo.features;
            out.snapshots.push(features.clone());
            out.queries.push(queries.clone());
            out.scores.extend(lo.scores);
        }
        out.dictionary = queries;
        out.features = features;
        Ok(out)
    }

    /// Token mean per image, mean over images, linear map to affordance logits.
    pub fn classify(&self, g: &mut Graph, p: &Bound, features: &[Var]) -> Var {
        classify_affordance(g, p, &self.classifier, features)
    }
}

pub fn classify_affordance(g: &mut Graph, p: &Bound, head: &Linear, features: &[Var]) -> Var {
    let pooled: Vec<Var> = features.iter().map(|&f| g.mean_rows(f)).collect();
    let mean = g.mean_n(&pooled);
    head.forward(g, p, mean)
}

/// Stacks per-image `M × C` values into an `n × M × C` array (outer index first).
pub fn stack_dictionary(g: &Graph, dictionary: &[Var]) -> Vec<Tensor> {
    dictionary.iter().map(|&v| g.value(v).clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn attention(store: &mut ParamStore, dim: usize, heads: usize) -> Attention {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        Attention::new(store, &mut rng, "a", dim, heads)
    }

    #[test]
    fn singleton_key_identity_projection() {
        let mut store = ParamStore::new();
        let a = attention(&mut store, 4, 2);
        for id in [a.wq, a.wk, a.wv, a.wo] {
            *store.get_mut(id) = Tensor::identity(4);
        }
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.5, 2.0]]));
        let kv = g.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]));
        let out = a.forward(&mut g, &p, q, kv, kv).unwrap();
        let pre = g.value(out.pre_norm);
        for r in 0..2 {
            for c in 0..4 {
                let want = g.value(q).get(r, c) + g.value(kv).get(0, c);
                assert!((pre.get(r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut a = attention(&mut store, 4, 2);
        a.heads = 3;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let x = g.constant(Tensor::zeros(2, 4));
        assert!(a.forward(&mut g, &p, x, x, x).is_err());
    }

    #[test]
    fn layer_shapes_and_identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let iam = Iam::new(&mut store, &mut rng, 8, 8, 4, 1, 2);
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &store);
        let img = normal_tensor(&mut rng, 4, 8, 1.0);
        let f = g.constant(img);
        let out = iam.run(&mut g, &p, &[f, f]).unwrap();
        assert_eq!(out.dictionary.len(), 2);
        assert_eq!(g.shape(out.dictionary[0]), (4, 8));
        assert_eq!(g.shape(out.features[0]), (4, 8));
        assert_eq!(g.value(out.features[0]), g.value(out.features[1]));
        assert_eq!(out.snapshots.len(), 1);
    }

    #[test]
    fn projection_only_when_widths_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        assert!(Iam::new(&mut store, &mut rng, 8, 8, 4, 1, 2).image_proj.is_none());
        let mut store = ParamStore::new();
        assert!(Iam::new(&mut store, &mut rng, 6, 8, 4, 1, 2).image_proj.is_some());
    }
}
