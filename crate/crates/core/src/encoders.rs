//! Image and point-cloud feature extractors.
//!
//! The point branch is a stack of set-abstraction stages (farthest point
//! sampling, kNN grouping, shared MLP, max-pool). The image branch is four
//! strided 3×3 convolutions. Feature propagation interpolates abstracted
//! features back onto the full cloud for the decoder.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, Mlp, ParamId, ParamStore};
use crate::tensor::Tensor;

pub type Point = [f64; 3];

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest point sampling.
///
/// Each pick after `start` maximises the minimum distance to the points
/// already chosen; ties go to the lowest index.
pub fn farthest_point_sample(coords: &[Point], k: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::Shape(format!("cannot sample {k} of {n} points")));
    }
    if start >= n {
        return Err(Error::Shape(format!("start index {start} out of range for {n} points")));
    }
    let mut picked = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut cur = start;
    for _ in 0..k {
        picked.push(cur);
        chosen[cur] = true;
        let c = coords[cur];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in coords.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(picked)
}

/// Indices of the `k` nearest `coords` to each center, nearest first,
/// ties broken by lower index.
pub fn knn_group(coords: &[Point], centers: &[Point], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::Shape(format!("cannot group {k} neighbours from {n} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut d = vec![0.0; n];
    Ok(centers
        .iter()
        .map(|c| {
            for (di, p) in d.iter_mut().zip(coords) {
                *di = dist2(p, c);
            }
            order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
            let by = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
            if k < n {
                order.select_nth_unstable_by(k - 1, by);
            }
            let mut row = order[..k].to_vec();
            row.sort_by(by);
            row
        })
        .collect())
}

/// Inverse-distance weights from the `k` nearest coarse points (weights
/// `1/(d + 1e-8)`, normalised). A coincident coarse point takes all the weight.
pub fn interpolation_weights(fine: &[Point], coarse: &[Point], k: usize) -> Vec<Vec<(usize, f64)>> {
    let k = k.min(coarse.len());
    let groups = knn_group(coarse, fine, k).expect("k clamped to coarse size");
    groups
        .into_iter()
        .zip(fine)
        .map(|(nbrs, f)| {
            let d: Vec<f64> = nbrs.iter().map(|&j| dist2(&coarse[j], f).sqrt()).collect();
            if d[0] == 0.0 {
                return vec![(nbrs[0], 1.0)];
            }
            let w: Vec<f64> = d.iter().map(|di| 1.0 / (di + 1e-8)).collect();
            let s: f64 = w.iter().sum();
            nbrs.into_iter().zip(w).map(|(j, wi)| (j, wi / s)).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub points: usize,
    pub neighbors: usize,
    pub mlp: Vec<usize>,
}

/// One level of the point pyramid inside a graph.
#[derive(Clone, Debug)]
pub struct Level {
    pub coords: Vec<Point>,
    pub features: Var,
}

/// Materialised pyramid values; stage 0 is the input cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeaturePyramid {
    pub stages: Vec<(Vec<Point>, Tensor)>,
}

impl PointFeaturePyramid {
    pub fn from_levels(g: &Graph, levels: &[Level]) -> Self {
        Self {
            stages: levels
                .iter()
                .map(|l| (l.coords.clone(), g.value(l.features).clone()))
                .collect(),
        }
    }

    /// Deepest features `P_in`.
    pub fn deepest(&self) -> &Tensor {
        &self.stages.last().expect("nonempty pyramid").1
    }
}

#[derive(Clone, Debug)]
pub struct SetAbstraction {
    pub config: StageConfig,
    pub mlp: Mlp,
}

impl SetAbstraction {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, config: StageConfig) -> Self {
        let mlp = Mlp::new(store, rng, &format!("{name}.mlp"), in_dim + 3, &config.mlp, true);
        Self { config, mlp }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Samples centers, groups neighbours, applies the shared MLP to
    /// `[neighbour feature, neighbour − center]` and max-pools each group.
    pub fn forward(&self, g: &mut Graph, p: &Bound, prev: &Level, fps_start: usize) -> Result<Level> {
        let centers_idx = farthest_point_sample(&prev.coords, self.config.points, fps_start)?;
        let centers: Vec<Point> = centers_idx.iter().map(|&i| prev.coords[i]).collect();
        let groups = knn_group(&prev.coords, &centers, self.config.neighbors)?;
        let features = self.group_and_pool(g, p, prev, &centers, &groups);
        Ok(Level {
            coords: centers,
            features,
        })
    }

    pub fn group_and_pool(
        &self,
        g: &mut Graph,
        p: &Bound,
        prev: &Level,
        centers: &[Point],
        groups: &[Vec<usize>],
    ) -> Var {
        let k = groups.first().map_or(0, Vec::len);
        let flat: Vec<usize> = groups.iter().flatten().copied().collect();
        let mut rel = Tensor::zeros(flat.len(), 3);
        for (gi, (grp, c)) in groups.iter().zip(centers).enumerate() {
            for (j, &i) in grp.iter().enumerate() {
                let q = prev.coords[i];
                rel.row_mut(gi * k + j).copy_from_slice(&[q[0] - c[0], q[1] - c[1], q[2] - c[2]]);
            }
        }
        let feats = g.gather_rows(prev.features, flat);
        let rel = g.constant(rel);
        let x = g.concat_cols(&[feats, rel]);
        let h = self.mlp.forward(g, p, x);
        g.max_pool_groups(h, k)
    }
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub stages: Vec<SetAbstraction>,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, configs: Vec<StageConfig>) -> Self {
        let mut in_dim = 3;
        let stages = configs
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let sa = SetAbstraction::new(store, rng, &format!("point_encoder.sa{i}"), in_dim, c);
                in_dim = sa.out_dim();
                sa
            })
            .collect();
        Self { stages }
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().map_or(3, SetAbstraction::out_dim)
    }

    /// Level 0 holds the input coordinates as features; the last level is `P_in`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, coords: &[Point], fps_start: usize) -> Result<Vec<Level>> {
        let feats = Tensor::from_vec(coords.len(), 3, coords.iter().flatten().copied().collect());
        let mut levels = vec![Level {
            coords: coords.to_vec(),
            features: g.constant(feats),
        }];
        for sa in &self.stages {
            let next = sa.forward(g, p, levels.last().expect("nonempty"), fps_start)?;
            levels.push(next);
        }
        Ok(levels)
    }
}

/// Convolution with weights stored as `(k·k·in) × out` in `(ky, kx, c)` order.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, fan_in, out_ch, (2.0 / fan_in as f64).sqrt()),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_ch));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// `x` is `(h·w) × in_ch`, row-major over pixels. Returns the ReLU output
    /// and its spatial size.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        let (ho, wo) = (self.output_side(h), self.output_side(w));
        let (k, c) = (self.kernel, self.in_ch);
        let cols = k * k * c;
        let mut index = Vec::with_capacity(ho * wo * cols);
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ci in 0..c {
                            index.push(inside.then(|| (iy as usize * w + ix as usize) * c + ci));
                        }
                    }
                }
            }
        }
        let patches = g.gather(x, index, ho * wo, cols);
        let y = g.matmul(patches, p.var(self.weight));
        let y = g.add_row(y, p.var(self.bias));
        (g.relu(y), ho, wo)
    }
}

/// Dense `D × H' × W'` features stored channels-first.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureMap {
    pub features: Tensor,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub source_id: String,
}

impl ImageFeatureMap {
    /// From `(h·w) × D` tokens.
    pub fn from_tokens(tokens: &Tensor, height: usize, width: usize, source_id: &str) -> Self {
        Self {
            features: tokens.transpose(),
            channels: tokens.cols(),
            height,
            width,
            source_id: source_id.to_string(),
        }
    }

    pub fn get(&self, d: usize, y: usize, x: usize) -> f64 {
        self.features.get(d, y * self.width + x)
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub convs: Vec<Conv2d>,
}

impl ImageEncoder {
    /// Four 3×3 stride-2 convolutions with widths `widths[0..3]` then `out_dim`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, widths: &[usize], out_dim: usize) -> Self {
        let mut chans = vec![3];
        chans.extend_from_slice(widths);
        chans.push(out_dim);
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(store, rng, &format!("image_encoder.conv{i}"), w[0], w[1], 3, 2, 1))
            .collect();
        Self { convs }
    }

    pub fn out_dim(&self) -> usize {
        self.convs.last().map_or(3, |c| c.out_ch)
    }

    /// Returns `(H'·W') × D` tokens and `(H', W')`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: &RgbImage) -> Result<(Var, usize, usize)> {
        if image.width != image.height || image.width % 16 != 0 {
            return Err(Error::Shape(format!(
                "image {}x{} must be square with a side divisible by 16",
                image.width, image.height
            )));
        }
        let mut x = g.constant(Tensor::from_vec(image.width * image.height, 3, image.data.clone()));
        let (mut h, mut w) = (image.height, image.width);
        for conv in &self.convs {
            let (y, ho, wo) = conv.forward(g, p, x, h, w);
            x = y;
            h = ho;
            w = wo;
        }
        Ok((x, h, w))
    }
}

/// Upsampling path: per level, interpolate coarse features onto the finer
/// points, concatenate the finer level's own features, apply a shared MLP.
#[derive(Clone, Debug)]
pub struct FeaturePropagation {
    /// Deepest level first.
    pub mlps: Vec<Mlp>,
}

impl FeaturePropagation {
    /// `level_dims[s]` is the feature width of pyramid level `s` (level 0 = 3).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        level_dims: &[usize],
        deep_dim: usize,
        widths: &[Vec<usize>],
    ) -> Self {
        let levels = level_dims.len() - 1;
        assert_eq!(widths.len(), levels, "one propagation MLP per abstraction level");
        let mut cur = deep_dim;
        let mlps = (0..levels)
            .map(|j| {
                let skip = level_dims[levels - 1 - j];
                let m = Mlp::new(store, rng, &format!("{name}.fp{j}"), cur + skip, &widths[j], true);
                cur = m.out_dim();
                m
            })
            .collect();
        Self { mlps }
    }

    pub fn out_dim(&self) -> usize {
        self.mlps.last().map_or(0, Mlp::out_dim)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, levels: &[Level], deep: Var) -> Result<Var> {
        let s = levels.len() - 1;
        if g.shape(deep).0 != levels[s].coords.len() {
            return Err(Error::Shape(format!(
                "deep features have {} rows for {} abstracted points",
                g.shape(deep).0,
                levels[s].coords.len()
            )));
        }
        let mut cur = deep;
        for (j, mlp) in self.mlps.iter().enumerate() {
            let (coarse, fine) = (&levels[s - j], &levels[s - j - 1]);
            let w = interpolation_weights(&fine.coords, &coarse.coords, 3);
            let interp = g.sparse_combine(cur, w);
            let x = g.concat_cols(&[interp, fine.features]);
            cur = mlp.forward(g, p, x);
        }
        Ok(cur)
    }
}
