//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! trainable leaf.
//!
//! ```
//! use mifag::autograd::Graph;
//! use mifag::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.param(&Tensor::from_vec(1, 2, vec![2.0, -1.0]));
//! let x = g.constant(Tensor::from_vec(2, 1, vec![3.0, 4.0]));
//! let y = g.matmul(w, x); // 2*3 - 4 = 2
//! let grads = g.backward(y);
//! assert_eq!(g.value(y).item(), 2.0);
//! assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
//! ```

use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    MaxPool {
        src: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    AddN(Vec<Var>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    Reshape(Var),
    RowNormalize {
        src: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    SparseCombine {
        src: Var,
        weights: Vec<Vec<(usize, f64)>>,
    },
    Custom {
        inputs: Vec<Var>,
        local: Vec<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation of a single forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not influence
    /// the output.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf initialised from `value`.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} bias");
        let mut v = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), -1.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(r, c, data), Op::Mul(a, b), rg)
    }

    /// Scales each row of `a` by the matching entry of the column `w` (`rows × 1`).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(w), (r, 1), "mul_col expects a {r}x1 column");
        let mut v = self.value(a).clone();
        for i in 0..r {
            let s = self.value(w).get(i, 0);
            v.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(a) || self.rg(w);
        let _ = c;
        self.push(v, Op::MulCol(a, w), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let xv = self.value(x);
        let mut xhat = Tensor::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for i in 0..r {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Elementwise gather from the flattened `src`; `None` entries read as zero.
    pub fn gather(&mut self, src: Var, index: Vec<Option<usize>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let s = self.value(src).data();
        let data = index
            .iter()
            .map(|i| i.map_or(0.0, |i| s[i]))
            .collect();
        let rg = self.rg(src);
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather { src, index }, rg)
    }

    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let sv = self.value(src);
        let c = sv.cols();
        let mut out = Tensor::zeros(rows.len(), c);
        for (o, &r) in rows.iter().enumerate() {
            out.row_mut(o).copy_from_slice(sv.row(r));
        }
        let rg = self.rg(src);
        self.push(out, Op::GatherRows { src, rows }, rg)
    }

    /// Column-wise max over consecutive row groups of size `group`.
    /// Ties resolve to the first row of the group.
    pub fn max_pool_groups(&mut self, src: Var, group: usize) -> Var {
        let sv = self.value(src);
        let (r, c) = sv.shape();
        assert!(group > 0 && r % group == 0, "rows {r} not divisible by group {group}");
        let g = r / group;
        let mut out = Tensor::zeros(g, c);
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut best = gi * group;
                let mut best_v = sv.get(best, j);
                for k in 1..group {
                    let row = gi * group + k;
                    let v = sv.get(row, j);
                    if v > best_v {
                        best_v = v;
                        best = row;
                    }
                }
                out.set(gi, j, best_v);
                argmax[gi * c + j] = best * c + j;
            }
        }
        let rg = self.rg(src);
        self.push(out, Op::MaxPool { src, argmax }, rg)
    }

    /// Mean over rows, producing `1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = av.shape();
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for (o, v) in out.row_mut(0).iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    /// Sum of same-shaped nodes, accumulated in index order.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n of nothing");
        let mut v = self.value(vars[0]).clone();
        for &x in &vars[1..] {
            v.add_assign(self.value(x));
        }
        let rg = vars.iter().any(|&x| self.rg(x));
        self.push(v, Op::AddN(vars.to_vec()), rg)
    }

    /// Mean of same-shaped nodes, reduced in index order.
    pub fn mean_n(&mut self, vars: &[Var]) -> Var {
        let s = self.add_n(vars);
        self.scale(s, 1.0 / vars.len() as f64)
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let r = self.shape(vars[0]).0;
        let total: usize = vars.iter().map(|&v| self.shape(v).1).sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for &v in vars {
            let t = self.value(v);
            assert_eq!(t.rows(), r, "concat_cols row mismatch");
            for i in 0..r {
                out.row_mut(i)[off..off + t.cols()].copy_from_slice(t.row(i));
            }
            off += t.cols();
        }
        let rg = vars.iter().any(|&x| self.rg(x));
        self.push(out, Op::ConcatCols(vars.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        let c = self.shape(vars[0]).1;
        let mut data = Vec::new();
        let mut r = 0;
        for &v in vars {
            let t = self.value(v);
            assert_eq!(t.cols(), c, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            r += t.rows();
        }
        let rg = vars.iter().any(|&x| self.rg(x));
        self.push(Tensor::from_vec(r, c, data), Op::ConcatRows(vars.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let sv = self.value(src);
        assert!(start + len <= sv.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(sv.rows(), len);
        for i in 0..sv.rows() {
            out.row_mut(i).copy_from_slice(&sv.row(i)[start..start + len]);
        }
        let rg = self.rg(src);
        self.push(out, Op::SliceCols { src, start }, rg)
    }

    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(src).clone().reshaped(rows, cols);
        let rg = self.rg(src);
        self.push(v, Op::Reshape(src), rg)
    }

    /// Divides each row by `(‖row‖ + eps)`.
    pub fn row_normalize(&mut self, src: Var, eps: f64) -> Var {
        let mut v = self.value(src).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = n + eps;
            row.iter_mut().for_each(|x| *x /= d);
            norms.push(n);
        }
        let rg = self.rg(src);
        self.push(v, Op::RowNormalize { src, norms, eps }, rg)
    }

    /// `out[r] = Σ w · src[i]` for each `(i, w)` in `weights[r]`, with constant weights.
    pub fn sparse_combine(&mut self, src: Var, weights: Vec<Vec<(usize, f64)>>) -> Var {
        let sv = self.value(src);
        let c = sv.cols();
        let mut out = Tensor::zeros(weights.len(), c);
        for (r, ws) in weights.iter().enumerate() {
            let orow = out.row_mut(r);
            for &(i, w) in ws {
                for (o, x) in orow.iter_mut().zip(sv.row(i)) {
                    *o += w * x;
                }
            }
        }
        let rg = self.rg(src);
        self.push(out, Op::SparseCombine { src, weights }, rg)
    }

    /// Scalar node whose value and local gradients were computed externally.
    /// `local[k]` is `∂value/∂inputs[k]`.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, local: Vec<Tensor>) -> Var {
        assert_eq!(inputs.len(), local.len());
        for (&v, l) in inputs.iter().zip(&local) {
            assert_eq!(self.shape(v), l.shape(), "custom_scalar gradient shape mismatch");
        }
        let rg = inputs.iter().any(|&x| self.rg(x));
        self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                local,
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate_with(grads, *row, |acc| {
                    for i in 0..g.rows() {
                        for (o, v) in acc.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |acc| {
                    for ((o, gi), bi) in acc.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gi * bi;
                    }
                });
                self.accumulate_with(grads, *b, |acc| {
                    for ((o, gi), ai) in acc.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::MulCol(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                self.accumulate_with(grads, *a, |acc| {
                    for i in 0..g.rows() {
                        let s = wv.get(i, 0);
                        for (o, gi) in acc.row_mut(i).iter_mut().zip(g.row(i)) {
                            *o += gi * s;
                        }
                    }
                });
                self.accumulate_with(grads, *w, |acc| {
                    for i in 0..g.rows() {
                        let d: f64 = g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                        acc.data_mut()[i] += d;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate_with(grads, *a, |acc| {
                    for ((o, gi), xi) in acc.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate_with(grads, *a, |acc| {
                    for ((o, gi), yi) in acc.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                self.accumulate_with(grads, *a, |acc| {
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in acc.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma).data();
                let (r, c) = xhat.shape();
                self.accumulate_with(grads, *beta, |acc| {
                    for i in 0..r {
                        for (o, v) in acc.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
                self.accumulate_with(grads, *gamma, |acc| {
                    for i in 0..r {
                        for ((o, v), h) in acc.row_mut(0).iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                            *o += v * h;
                        }
                    }
                });
                self.accumulate_with(grads, *x, |acc| {
                    let mut gh = vec![0.0; c];
                    for i in 0..r {
                        for (j, ghj) in gh.iter_mut().enumerate() {
                            *ghj = g.get(i, j) * gv[j];
                        }
                        let xr = xhat.row(i);
                        let mean_g = gh.iter().sum::<f64>() / c as f64;
                        let mean_gx = gh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for (j, o) in acc.row_mut(i).iter_mut().enumerate() {
                            *o += inv_std[i] * (gh[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                });
            }
            Op::Gather { src, index } => {
                self.accumulate_with(grads, *src, |acc| {
                    let d = acc.data_mut();
                    for (gi, i) in g.data().iter().zip(index) {
                        if let Some(i) = i {
                            d[*i] += gi;
                        }
                    }
                });
            }
            Op::GatherRows { src, rows } => {
                self.accumulate_with(grads, *src, |acc| {
                    for (o, &r) in rows.iter().enumerate() {
                        for (a, v) in acc.row_mut(r).iter_mut().zip(g.row(o)) {
                            *a += v;
                        }
                    }
                });
            }
            Op::MaxPool { src, argmax } => {
                self.accumulate_with(grads, *src, |acc| {
                    let d = acc.data_mut();
                    for (gi, &i) in g.data().iter().zip(argmax) {
                        d[i] += gi;
                    }
                });
            }
            Op::MeanRows(a) => {
                let r = self.shape(*a).0;
                let inv = 1.0 / r as f64;
                self.accumulate_with(grads, *a, |acc| {
                    for i in 0..r {
                        for (o, v) in acc.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::AddN(vars) => {
                for &v in vars {
                    self.accumulate(grads, v, g.clone());
                }
            }
            Op::ConcatCols(vars) => {
                let mut off = 0;
                for &v in vars {
                    let (r, c) = self.shape(v);
                    self.accumulate_with(grads, v, |acc| {
                        for i in 0..r {
                            for (o, x) in acc.row_mut(i).iter_mut().zip(&g.row(i)[off..off + c]) {
                                *o += x;
                            }
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(vars) => {
                let mut off = 0;
                for &v in vars {
                    let (r, c) = self.shape(v);
                    let slice = &g.data()[off * c..(off + r) * c];
                    self.accumulate_with(grads, v, |acc| {
                        for (o, x) in acc.data_mut().iter_mut().zip(slice) {
                            *o += x;
                        }
                    });
                    off += r;
                }
            }
            Op::SliceCols { src, start } => {
                let len = g.cols();
                self.accumulate_with(grads, *src, |acc| {
                    for i in 0..g.rows() {
                        for (o, x) in acc.row_mut(i)[*start..start + len].iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Reshape(src) => {
                let (r, c) = self.shape(*src);
                self.accumulate(grads, *src, g.clone().reshaped(r, c));
            }
            Op::RowNormalize { src, norms, eps } => {
                let x = self.value(*src);
                self.accumulate_with(grads, *src, |acc| {
                    for (i, &n) in norms.iter().enumerate() {
                        let d = n + eps;
                        let (xr, gr) = (x.row(i), g.row(i));
                        let gx: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let coef = if n > 0.0 { gx / (n * d * d) } else { 0.0 };
                        for ((o, xi), gi) in acc.row_mut(i).iter_mut().zip(xr).zip(gr) {
                            *o += gi / d - xi * coef;
                        }
                    }
                });
            }
            Op::SparseCombine { src, weights } => {
                self.accumulate_with(grads, *src, |acc| {
                    for (r, ws) in weights.iter().enumerate() {
                        for &(i, w) in ws {
                            for (o, x) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += w * x;
                            }
                        }
                    }
                });
            }
            Op::Custom { inputs, local } => {
                let s = g.item();
                for (&v, l) in inputs.iter().zip(local) {
                    self.accumulate(grads, v, l.map(|x| x * s));
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `f` built on a fresh graph per evaluation.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], t.rows(), t.cols());
            for e in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == k {
                                x.data_mut()[e] += delta;
                            }
                            g2.param(&x)
                        })
                        .collect();
                    let o = f(&mut g2, &vs);
                    g2.value(o).item()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn t(r: usize, c: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..r * c)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(r, c, data)
    }

    fn weighted_sum(g: &mut Graph, v: Var) -> Var {
        let (r, c) = g.shape(v);
        let w = t(r, c, 99);
        let value: f64 = g.value(v).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        g.custom_scalar(&[v], value, vec![w])
    }

    #[test]
    fn matmul_grads() {
        check(vec![t(3, 4, 1), t(4, 2, 2)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            weighted_sum(g, m)
        });
        check(vec![t(3, 4, 1), t(5, 4, 2)], |g, v| {
            let m = g.matmul_nt(v[0], v[1]);
            weighted_sum(g, m)
        });
    }

    #[test]
    fn elementwise_grads() {
        check(vec![t(3, 4, 3), t(3, 4, 4), t(1, 4, 5), t(3, 1, 6)], |g, v| {
            let a = g.add(v[0], v[1]);
            let b = g.mul(a, v[1]);
            let c = g.add_row(b, v[2]);
            let d = g.mul_col(c, v[3]);
            let e = g.sub(d, v[0]);
            let f = g.sigmoid(e);
            let s = g.scale(f, 1.7);
            weighted_sum(g, s)
        });
    }

    #[test]
    fn softmax_and_layer_norm_grads() {
        check(vec![t(3, 5, 7), t(1, 5, 8), t(1, 5, 9)], |g, v| {
            let s = g.softmax_rows(v[0]);
            let l = g.layer_norm(v[0], v[1], v[2], 1e-5);
            let x = g.add(s, l);
            weighted_sum(g, x)
        });
    }

    #[test]
    fn structural_grads() {
        check(vec![t(4, 3, 10), t(4, 2, 11)], |g, v| {
            let cc = g.concat_cols(&[v[0], v[1]]);
            let sl = g.slice_cols(cc, 1, 3);
            let cr = g.concat_rows(&[sl, sl]);
            let gr = g.gather_rows(cr, vec![0, 7, 3, 3]);
            let ga = g.gather(gr, vec![Some(0), None, Some(5), Some(11), Some(5), Some(2)], 2, 3);
            let rs = g.reshape(ga, 3, 2);
            let mr = g.mean_rows(rs);
            let mp = g.max_pool_groups(gr, 2);
            let an = g.add_n(&[mp, mp]);
            let sc = g.sparse_combine(an, vec![vec![(0, 0.3), (1, 0.7)], vec![(1, 2.0)]]);
            let a = weighted_sum(g, mr);
            let b = weighted_sum(g, sc);
            g.add(a, b)
        });
    }

    #[test]
    fn row_normalize_grads() {
        check(vec![t(3, 4, 12)], |g, v| {
            let n = g.row_normalize(v[0], 1e-8);
            weighted_sum(g, n)
        });
    }

    #[test]
    fn relu_grad_away_from_kink() {
        let x = Tensor::from_vec(1, 4, vec![-1.0, 0.5, 2.0, -0.3]);
        check(vec![x], |g, v| {
            let r = g.relu(v[0]);
            weighted_sum(g, r)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::filled(1, 1, 2.0));
        let p = g.param(&Tensor::filled(1, 1, 3.0));
        let y = g.mul(c, p);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
