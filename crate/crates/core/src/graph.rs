//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] borrows the parameter stores for its lifetime; parameter nodes read
//! their values in place. Every op records just enough (cached softmax probabilities,
//! normalised activations) for its backward rule. Gradients for frozen parameters are
//! never accumulated, but still flow through them to upstream nodes.

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{GradBuffer, ParamId, ParamStore, StoreKind};
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Mat};

/// Sentinel in gather index tables meaning "write zero".
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    StdRows { x: Var, mean: Vec<T>, std: Vec<T> },
    Gather(Var, Rc<[u32]>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    CueLoss { pred: Var, target: Vec<T>, beta: T, continuous: bool },
    Sum(Var),
    Mean(Var),
}

enum Value<T> {
    Owned(Mat<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    model: &'a ParamStore<T>,
    lm: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Node gradients produced by [`Graph::backward`]. Only leaf gradients are retained.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.index()].as_ref()
    }
}

#[inline]
fn gelu_inner<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    // tanh through one exponential; saturates cleanly for large |u|
    let t = T::one() - T::of(2.0) / (T::one() + (u + u).exp());
    let val = half * x * (T::one() + t);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    let der = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (val, der)
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(model: &'a ParamStore<T>, lm: Option<&'a ParamStore<T>>) -> Self {
        Self { model, lm, nodes: Vec::with_capacity(512), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn store(&self, kind: StoreKind) -> &'a ParamStore<T> {
        match kind {
            StoreKind::Model => self.model,
            StoreKind::Lm => self.lm.expect("graph built without a language-model store"),
        }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        match &self.nodes[v.index()].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store(id.store).get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var((self.nodes.len() - 1) as u32)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.index()].needs_grad)
    }

    /// A leaf. With `requires_grad` its gradient is reported by `backward`.
    pub fn input(&mut self, value: Mat<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.input(value, false)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        // frozen parameters still need a gradient path *through* them, which is
        // handled by their consumers; the leaf itself never accumulates
        let trainable = !self.store(id.store).entry(id).frozen;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param, needs_grad: trainable });
        let v = Var((self.nodes.len() - 1) as u32);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul shape {:?} x {:?}", av.shape(), bv.shape());
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm_acc(av.rows, av.cols, bv.cols, &av.data, &bv.data, &mut out.data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a single row");
        assert_eq!(av.cols, rv.cols, "add_row width");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x * y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_inner(x).0);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalisation with learned `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = xv.shape();
        assert_eq!(gv.shape(), (1, c), "layer_norm gain shape");
        assert_eq!(bv.shape(), (1, c), "layer_norm bias shape");
        let eps = T::of(eps);
        let cn = T::of(c as f64);
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        let mut out = Mat::zeros(n, c);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out.data[r * c + j] = xh * gv.data[j] + bv.data[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Scaled dot-product multi-head attention: queries `n×d`, keys/values `m×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        self.attention_masked(q, k, v, heads, false)
    }

    /// As [`Graph::attention`]; with `causal`, query row `r` sees keys `0..=r + (m - n)`.
    pub fn attention_masked(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        assert_eq!(kv.cols, d, "attention key width");
        assert_eq!(vv.shape(), (m, d), "attention value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = Mat::zeros(n, d);
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); m * dh];
        let mut vh = vec![T::zero(); m * dh];
        let mut oh = vec![T::zero(); n * dh];
        for h in 0..heads {
            split_head(&qv.data, n, d, h, dh, &mut qh);
            split_head(&kv.data, m, d, h, dh, &mut kh);
            split_head(&vv.data, m, d, h, dh, &mut vh);
            let p = &mut probs[h * n * m..(h + 1) * n * m];
            gemm_nt_acc(n, dh, m, &qh, &kh, p);
            for r in 0..n {
                let row = &mut p[r * m..(r + 1) * m];
                row.iter_mut().for_each(|s| *s *= scale);
                if causal {
                    let limit = r + m.saturating_sub(n);
                    for s in row.iter_mut().skip(limit + 1) {
                        *s = T::neg_infinity();
                    }
                }
                softmax_in_place(row);
            }
            oh.iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(n, m, dh, p, &vh, &mut oh);
            merge_head(&oh, n, d, h, dh, &mut out.data);
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Attention probabilities cached by an attention node, `heads × n × m` row-major.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.index()].op {
            Op::Attention { probs, heads, .. } => Some((probs.as_slice(), *heads)),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows width");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = self.ng(parts);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let out = Mat::from_vec(len, av.cols, av.data[start * av.cols..(start + len) * av.cols].to_vec());
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Column means over rows, `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(1, av.cols);
        for r in 0..av.rows {
            for (o, &x) in out.data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let inv = T::one() / T::of(av.rows as f64);
        out.data.iter_mut().for_each(|o| *o *= inv);
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Column standard deviations over rows, `sqrt(var + eps)` with population variance.
    pub fn std_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (n, c) = av.shape();
        let inv = T::one() / T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(av.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![T::zero(); c];
        for r in 0..n {
            for ((s, &x), &m) in var.iter_mut().zip(av.row(r)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let eps = T::of(eps);
        let std: Vec<T> = var.iter().map(|&s| (s * inv + eps).sqrt()).collect();
        let out = Mat::from_vec(1, c, std.clone());
        let ng = self.ng(&[a]);
        self.push(out, Op::StdRows { x: a, mean, std }, ng)
    }

    /// `out.data[i] = a.data[idx[i]]`, or zero where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, idx: Rc<[u32]>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather index length");
        let av = self.value(a);
        let data = idx
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { av.data[i as usize] })
            .collect();
        let ng = self.ng(&[a]);
        self.push(Mat::from_vec(rows, cols, data), Op::Gather(a, idx), ng)
    }

    /// Rows `ids` of a table, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let cols = self.value(table).cols;
        let nrows = self.value(table).rows;
        let mut idx = Vec::with_capacity(ids.len() * cols);
        for &r in ids {
            assert!(r < nrows, "row {r} out of range for table with {nrows} rows");
            idx.extend((0..cols).map(|c| (r * cols + c) as u32));
        }
        self.gather(table, idx.into(), ids.len(), cols)
    }

    /// Mean token-level softmax cross-entropy, `1×1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        assert_eq!(targets.len(), n, "one target per row");
        let mut probs = lv.data.clone();
        let mut loss = T::zero();
        for r in 0..n {
            assert!(targets[r] < c, "target {} out of range {}", targets[r], c);
            let row = &mut probs[r * c..(r + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[targets[r]];
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let out = Mat::scalar(loss / T::of(n as f64));
        let ng = self.ng(&[logits]);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Piecewise quadratic/linear distance loss averaged over elements.
    ///
    /// With `continuous == false` the quadratic branch is `d²/β`; with `true` it is
    /// `d²/(2β)`, which meets the linear branch `d − β/2` at `d = β`.
    pub fn cue_loss(&mut self, pred: Var, target: &[T], beta: T, continuous: bool) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "cue_loss target length");
        let total: T = pv.data.iter().zip(target).map(|(&p, &y)| cue_elem((p - y).abs(), beta, continuous)).sum();
        let out = Mat::scalar(total / T::of(target.len() as f64));
        let ng = self.ng(&[pred]);
        self.push(out, Op::CueLoss { pred, target: target.to_vec(), beta, continuous }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Mat::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data.iter().copied().sum::<T>() / T::of(av.len() as f64);
        let ng = self.ng(&[a]);
        self.push(Mat::scalar(s), Op::Mean(a), ng)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_scaled(loss, T::one())
    }

    pub fn backward_scaled(&self, loss: Var, seed: T) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Mat::scalar(seed));
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Input | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    /// Adds parameter gradients into per-store buffers. Frozen entries are skipped.
    pub fn accumulate(&self, grads: &Gradients<T>, model: &mut GradBuffer<T>, mut lm: Option<&mut GradBuffer<T>>) {
        for (&id, &v) in &self.param_nodes {
            let Some(g) = grads.of(v) else { continue };
            if self.store(id.store).entry(id).frozen {
                continue;
            }
            match id.store {
                StoreKind::Model => model.grads[id.index as usize].add_assign(g),
                StoreKind::Lm => {
                    if let Some(buf) = lm.as_deref_mut() {
                        buf.grads[id.index as usize].add_assign(g)
                    }
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, f: impl FnOnce(&mut Mat<T>)) {
        if !self.nodes[v.index()].needs_grad {
            return;
        }
        let slot = &mut grads[v.index()];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Mat::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let out = match &self.nodes[i].value {
            Value::Owned(m) => m,
            Value::Param(_) => unreachable!(),
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                self.acc(grads, *a, |ga| gemm_nt_acc(m, n, k, &g.data, &bv.data, &mut ga.data));
                self.acc(grads, *b, |gb| gemm_tn_acc(m, k, n, &av.data, &g.data, &mut gb.data));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows {
                        for (o, &x) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, &gg), &y) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *o += gg * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, &gg), &x) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *o += gg * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, |ga| {
                    for (o, &gg) in ga.data.iter_mut().zip(&g.data) {
                        *o += gg * s;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((o, &gg), &x) in ga.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *o += gg * gelu_inner(x).1;
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |ga| {
                    for ((o, &gg), &y) in ga.data.iter_mut().zip(&g.data).zip(&out.data) {
                        *o += gg * y * (T::one() - y);
                    }
                });
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, |ga| {
                    for ((o, &gg), &y) in ga.data.iter_mut().zip(&g.data).zip(&out.data) {
                        *o += gg * (T::one() - y * y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                self.acc(grads, *a, |ga| {
                    for r in 0..out.rows {
                        let (y, gy) = (out.row(r), g.row(r));
                        let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *o += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let (n, c) = out.shape();
                self.acc(grads, *gamma, |gg| {
                    for r in 0..n {
                        for j in 0..c {
                            gg.data[j] += g.data[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for r in 0..n {
                        for (o, &x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                });
                let cn = T::of(c as f64);
                self.acc(grads, *x, |gx| {
                    for r in 0..n {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = g.data[r * c + j] * gv.data[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * c + j];
                        }
                        mean_d = mean_d / cn;
                        mean_dx = mean_dx / cn;
                        for j in 0..c {
                            let d = g.data[r * c + j] * gv.data[j];
                            gx.data[r * c + j] += rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |gp| {
                        for (o, &x) in gp.data.iter_mut().zip(&g.data[offset..offset + len]) {
                            *o += x;
                        }
                    });
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols;
                let start = *start;
                self.acc(grads, *a, |ga| {
                    for (o, &x) in ga.data[start * c..start * c + g.len()].iter_mut().zip(&g.data) {
                        *o += x;
                    }
                });
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows;
                let inv = T::one() / T::of(n as f64);
                self.acc(grads, *a, |ga| {
                    for r in 0..n {
                        for (o, &x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o += x * inv;
                        }
                    }
                });
            }
            Op::StdRows { x, mean, std } => {
                let xv = self.value(*x);
                let n = xv.rows;
                let inv = T::one() / T::of(n as f64);
                self.acc(grads, *x, |gx| {
                    for r in 0..n {
                        let xr = xv.row(r);
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += g.data[j] * (xr[j] - mean[j]) * inv / std[j];
                        }
                    }
                });
            }
            Op::Gather(a, idx) => {
                self.acc(grads, *a, |ga| {
                    for (&i, &x) in idx.iter().zip(&g.data) {
                        if i != GATHER_ZERO {
                            ga.data[i as usize] += x;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols;
                let n = targets.len();
                let s = g.item() / T::of(n as f64);
                self.acc(grads, *logits, |gl| {
                    for r in 0..n {
                        for j in 0..c {
                            let y = if j == targets[r] { T::one() } else { T::zero() };
                            gl.data[r * c + j] += s * (probs[r * c + j] - y);
                        }
                    }
                });
            }
            Op::CueLoss { pred, target, beta, continuous } => {
                let pv = self.value(*pred);
                let s = g.item() / T::of(target.len() as f64);
                let (beta, continuous) = (*beta, *continuous);
                self.acc(grads, *pred, |gp| {
                    for ((o, &p), &y) in gp.data.iter_mut().zip(&pv.data).zip(target) {
                        let diff = p - y;
                        let d = diff.abs();
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        let slope = if d < beta {
                            if continuous {
                                d / beta
                            } else {
                                T::of(2.0) * d / beta
                            }
                        } else {
                            T::one()
                        };
                        *o += s * slope * sign;
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc(grads, *a, |ga| ga.data.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let s = g.item() / T::of(n as f64);
                self.acc(grads, *a, |ga| ga.data.iter_mut().for_each(|o| *o += s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &Mat<T>,
        grads: &mut [Option<Mat<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        let m = kv.rows;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(m, d);
        let mut dv = Mat::zeros(m, d);
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); m * dh];
        let mut vh = vec![T::zero(); m * dh];
        let mut goh = vec![T::zero(); n * dh];
        let mut dp = vec![T::zero(); n * m];
        let mut tmp_n = vec![T::zero(); n * dh];
        let mut tmp_m = vec![T::zero(); m * dh];
        for h in 0..heads {
            split_head(&qv.data, n, d, h, dh, &mut qh);
            split_head(&kv.data, m, d, h, dh, &mut kh);
            split_head(&vv.data, m, d, h, dh, &mut vh);
            split_head(&g.data, n, d, h, dh, &mut goh);
            let p = &probs[h * n * m..(h + 1) * n * m];
            // dV = Pᵀ dO
            tmp_m.iter_mut().for_each(|x| *x = T::zero());
            gemm_tn_acc(n, m, dh, p, &goh, &mut tmp_m);
            merge_head_add(&tmp_m, m, d, h, dh, &mut dv.data);
            // dP = dO Vᵀ, then through softmax
            dp.iter_mut().for_each(|x| *x = T::zero());
            gemm_nt_acc(n, dh, m, &goh, &vh, &mut dp);
            for r in 0..n {
                let pr = &p[r * m..(r + 1) * m];
                let dr = &mut dp[r * m..(r + 1) * m];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (dd, &pp) in dr.iter_mut().zip(pr) {
                    *dd = pp * (*dd - dot) * scale;
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            tmp_n.iter_mut().for_each(|x| *x = T::zero());
            gemm_acc(n, m, dh, &dp, &kh, &mut tmp_n);
            merge_head_add(&tmp_n, n, d, h, dh, &mut dq.data);
            tmp_m.iter_mut().for_each(|x| *x = T::zero());
            gemm_tn_acc(n, m, dh, &dp, &qh, &mut tmp_m);
            merge_head_add(&tmp_m, m, d, h, dh, &mut dk.data);
        }
        self.acc(grads, q, |gq| gq.add_assign(&dq));
        self.acc(grads, k, |gk| gk.add_assign(&dk));
        self.acc(grads, v, |gv| gv.add_assign(&dv));
    }
}

fn split_head<T: Scalar>(src: &[T], rows: usize, d: usize, h: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn merge_head<T: Scalar>(src: &[T], rows: usize, d: usize, h: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn merge_head_add<T: Scalar>(src: &[T], rows: usize, d: usize, h: usize, dh: usize, dst: &mut [T]) {
    for r in 0..rows {
        for (o, &x) in dst[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *o += x;
        }
    }
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// One element of the cue loss given the absolute distance `d`.
#[inline]
pub fn cue_elem<T: Scalar>(d: T, beta: T, continuous: bool) -> T {
    if d < beta {
        if continuous {
            d * d / (T::of(2.0) * beta)
        } else {
            d * d / beta
        }
    } else {
        d - beta / T::of(2.0)
    }
}
