//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Values are
//! computed eagerly; [`Tape::backward`] walks the records in reverse and
//! accumulates vector-Jacobian products. The op set is exactly what the
//! prediction heads need: affine maps, layer norm, GELU, segmented
//! multi-head attention, grouped mean pooling, row gathering and the
//! Huber loss.

use std::collections::BTreeMap;
use std::ops::Range;

use super::tensor::{matmul, matmul_nt, matmul_tn, Grads, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Softmax(Var),
    Select(Var, usize),
    LayerNorm { x: Var, eps: f64, rstd: Vec<f64> },
    Gelu(Var),
    Attention(Box<AttentionCache>),
    GroupMean(Var, Vec<Range<usize>>),
    SliceRows(Var, usize, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Huber { pred: Var, targets: Vec<f64>, delta: f64 },
    Sum(Var),
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<Range<usize>>,
    heads: usize,
    /// Softmax probabilities per (segment, head), each `len x len`.
    probs: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like it if it did not influence the output.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, which is markedly cheaper than libm's
/// `tanh`; absolute error stays at the 1e-16 level.
fn fast_tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    let e = (2.0 * z).exp();
    (e - 1.0) / (e + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Huber penalty and its derivative for a single residual.
pub fn huber_elem(e: f64, delta: f64) -> (f64, f64) {
    if e.abs() <= delta {
        (0.5 * e * e, e)
    } else {
        (delta * (e.abs() - 0.5 * delta), delta * e.signum())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

fn add_into(acc: &mut Option<Tensor>, delta: Tensor) {
    match acc {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *acc = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).as_matrix_shape()
    }

    /// A differentiable input. Tensors are viewed as `rows x cols` matrices.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record every parameter of `params`; trainable ones receive gradients.
    pub fn load_params(&mut self, params: &ParamSet) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(name, p)| {
                let v = if p.trainable {
                    self.param(p.value.clone())
                } else {
                    self.constant(p.value.clone())
                };
                (name.to_string(), v)
            })
            .collect()
    }

    /// Compute `op`'s value from its inputs, refreshing any cache it holds.
    fn compute(&self, op: &mut Op) -> Result<Tensor> {
        match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::MatMul(a, b) => {
                let ((n, k), (_, m)) = (self.dims(*a), self.dims(*b));
                Tensor::matrix(n, m, matmul(self.value(*a).data(), self.value(*b).data(), n, k, m))
            }
            Op::Add(a, b) => {
                let (n, m) = self.dims(*a);
                let out = self.value(*a).data().iter().zip(self.value(*b).data()).map(|(x, y)| x + y).collect();
                Tensor::matrix(n, m, out)
            }
            Op::AddRow(a, row) => {
                let (n, m) = self.dims(*a);
                let r = self.value(*row).data();
                let mut out = self.value(*a).data().to_vec();
                for chunk in out.chunks_mut(m) {
                    for (o, b) in chunk.iter_mut().zip(r) {
                        *o += b;
                    }
                }
                Tensor::matrix(n, m, out)
            }
            Op::MulRow(a, row) => {
                let (n, m) = self.dims(*a);
                let r = self.value(*row).data();
                let mut out = self.value(*a).data().to_vec();
                for chunk in out.chunks_mut(m) {
                    for (o, g) in chunk.iter_mut().zip(r) {
                        *o *= g;
                    }
                }
                Tensor::matrix(n, m, out)
            }
            Op::Scale(a, sc) => {
                let (n, m) = self.dims(*a);
                Tensor::matrix(n, m, self.value(*a).data().iter().map(|x| x * *sc).collect())
            }
            Op::ScaleBy(a, sc) => {
                let sv = self.value(*sc).data()[0];
                let (n, m) = self.dims(*a);
                Tensor::matrix(n, m, self.value(*a).data().iter().map(|x| x * sv).collect())
            }
            Op::Softmax(a) => {
                let (n, m) = self.dims(*a);
                let mut out = self.value(*a).data().to_vec();
                for row in out.chunks_mut(m) {
                    softmax_in_place(row);
                }
                Tensor::matrix(n, m, out)
            }
            Op::Select(a, idx) => Ok(Tensor::scalar(self.value(*a).data()[*idx])),
            Op::LayerNorm { x, eps, rstd } => {
                let (n, m) = self.dims(*x);
                let mut out = self.value(*x).data().to_vec();
                rstd.clear();
                for row in out.chunks_mut(m) {
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let r = 1.0 / (var + *eps).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * r;
                    }
                    rstd.push(r);
                }
                Tensor::matrix(n, m, out)
            }
            Op::Gelu(a) => {
                let (n, m) = self.dims(*a);
                Tensor::matrix(n, m, self.value(*a).data().iter().map(|&x| gelu(x)).collect())
            }
            Op::Attention(c) => self.attention_forward(c),
            Op::GroupMean(a, groups) => {
                let m = self.dims(*a).1;
                let data = self.value(*a).data();
                let mut out = vec![0.0; groups.len() * m];
                for (gi, g) in groups.iter().enumerate() {
                    let o = &mut out[gi * m..(gi + 1) * m];
                    for r in g.clone() {
                        for (oo, v) in o.iter_mut().zip(&data[r * m..(r + 1) * m]) {
                            *oo += v;
                        }
                    }
                    let inv = 1.0 / g.len() as f64;
                    o.iter_mut().for_each(|v| *v *= inv);
                }
                Tensor::matrix(groups.len(), m, out)
            }
            Op::SliceRows(a, start, len) => {
                let m = self.dims(*a).1;
                Tensor::matrix(*len, m, self.value(*a).data()[*start * m..(*start + *len) * m].to_vec())
            }
            Op::ConcatRows(parts) => {
                let m = self.dims(parts[0]).1;
                let mut out = Vec::new();
                let mut n = 0;
                for &p in parts.iter() {
                    out.extend_from_slice(self.value(p).data());
                    n += self.dims(p).0;
                }
                Tensor::matrix(n, m, out)
            }
            Op::GatherRows(a, idx) => {
                let m = self.dims(*a).1;
                let data = self.value(*a).data();
                let mut out = Vec::with_capacity(idx.len() * m);
                for &i in idx.iter() {
                    out.extend_from_slice(&data[i * m..(i + 1) * m]);
                }
                Tensor::matrix(idx.len(), m, out)
            }
            Op::Huber { pred, targets, delta } => {
                let p = self.value(*pred).data();
                let loss = p.iter().zip(targets.iter()).map(|(a, b)| huber_elem(a - b, *delta).0).sum::<f64>()
                    / p.len() as f64;
                Ok(Tensor::scalar(loss))
            }
            Op::Sum(a) => Ok(Tensor::scalar(self.value(*a).data().iter().sum())),
        }
    }

    fn record(&mut self, mut op: Op, inputs: &[Var]) -> Result<Var> {
        let value = self.compute(&mut op)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return shape_err(format!("matmul of {n}x{k} by {k2}x{m}"));
        }
        self.record(Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return shape_err(format!("add of {:?} and {:?}", self.dims(a), self.dims(b)));
        }
        self.record(Op::Add(a, b), &[a, b])
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(row) != (1, m) {
            return shape_err(format!("add_row of {n}x{m} and {:?}", self.dims(row)));
        }
        self.record(Op::AddRow(a, row), &[a, row])
    }

    /// `a (n x m) * row (1 x m)` elementwise, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.dims(row) != (1, m) {
            return shape_err(format!("mul_row of {n}x{m} and {:?}", self.dims(row)));
        }
        self.record(Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.record(Op::Scale(a, s), &[a])
    }

    /// Multiply `a` by the `1 x 1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(format!("scale_by needs a 1x1 scale, got {:?}", self.dims(s)));
        }
        self.record(Op::ScaleBy(a, s), &[a, s])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax(a), &[a])
    }

    /// The element at flat index `idx` as a `1 x 1` value.
    pub fn select(&mut self, a: Var, idx: usize) -> Result<Var> {
        let numel = self.value(a).numel();
        if idx >= numel {
            return shape_err(format!("select index {idx} out of {numel}"));
        }
        self.record(Op::Select(a, idx), &[a])
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let op = Op::LayerNorm {
            x,
            eps,
            rstd: Vec::with_capacity(self.dims(x).0),
        };
        self.record(op, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu(a), &[a])
    }

    /// Multi-head scaled dot-product attention where each row range in
    /// `segments` is an independent sequence. Rows outside every segment
    /// produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || self.dims(v) != (n, d) {
            return shape_err("attention q/k/v shapes differ".into());
        }
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("width {d} not divisible by {heads} heads"));
        }
        if let Some(seg) = segments.iter().find(|s| s.is_empty() || s.end > n) {
            return shape_err(format!("segment {seg:?} invalid for {n} rows"));
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            segments: segments.to_vec(),
            heads,
            probs: Vec::new(),
        };
        self.record(Op::Attention(Box::new(cache)), &[q, k, v])
    }

    fn attention_forward(&self, c: &mut AttentionCache) -> Result<Tensor> {
        let (n, d) = self.dims(c.q);
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(c.q).data(), self.value(c.k).data(), self.value(c.v).data());
        let mut out = vec![0.0; n * d];
        c.probs.clear();
        for seg in &c.segments {
            let len = seg.len();
            for h in 0..c.heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for j in 0..len {
                        let kj = &kd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        p[i * len + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(&mut p[i * len..(i + 1) * len]);
                    let o = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for j in 0..len {
                        let w = p[i * len + j];
                        let vj = &vd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        for (oo, vv) in o.iter_mut().zip(vj) {
                            *oo += w * vv;
                        }
                    }
                }
                c.probs.push(p);
            }
        }
        Tensor::matrix(n, d, out)
    }

    /// One output row per group: the mean of the group's rows.
    pub fn group_mean(&mut self, a: Var, groups: &[Range<usize>]) -> Result<Var> {
        let n = self.dims(a).0;
        if groups.is_empty() {
            return shape_err("group_mean with no groups".into());
        }
        if let Some(g) = groups.iter().find(|g| g.is_empty() || g.end > n) {
            return shape_err(format!("group {g:?} invalid for {n} rows"));
        }
        self.record(Op::GroupMean(a, groups.to_vec()), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.dims(a).0;
        if len == 0 || start + len > n {
            return shape_err(format!("slice {start}..{} of {n} rows", start + len));
        }
        self.record(Op::SliceRows(a, start, len), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of zero parts".into());
        };
        let m = self.dims(first).1;
        if let Some(pm) = parts.iter().map(|&p| self.dims(p).1).find(|&pm| pm != m) {
            return shape_err(format!("concat of widths {m} and {pm}"));
        }
        self.record(Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.dims(a).0;
        if idx.is_empty() {
            return shape_err("gather of zero rows".into());
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return shape_err(format!("gather index {bad} out of {n} rows"));
        }
        self.record(Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Mean Huber loss of every element of `pred` against `targets`.
    pub fn huber(&mut self, pred: Var, targets: &[f64], delta: f64) -> Result<Var> {
        let p = self.value(pred).numel();
        if p != targets.len() {
            return shape_err(format!("huber of {p} predictions and {} targets", targets.len()));
        }
        let op = Op::Huber {
            pred,
            targets: targets.to_vec(),
            delta,
        };
        self.record(op, &[pred])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a), &[a])
    }

    fn inputs(op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::Select(a, _)
            | Op::LayerNorm { x: a, .. }
            | Op::Gelu(a)
            | Op::GroupMean(a, _)
            | Op::SliceRows(a, _, _)
            | Op::GatherRows(a, _)
            | Op::Huber { pred: a, .. }
            | Op::Sum(a) => vec![*a],
            Op::Attention(c) => vec![c.q, c.k, c.v],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }

    /// Indices of every node whose value depends on `leaf`, ascending.
    pub(crate) fn dependents(&self, leaf: Var) -> Vec<usize> {
        let mut hit = vec![false; self.nodes.len()];
        hit[leaf.0] = true;
        let mut out = Vec::new();
        for idx in leaf.0 + 1..self.nodes.len() {
            if Self::inputs(&self.nodes[idx].op).iter().any(|v| hit[v.0]) {
                hit[idx] = true;
                out.push(idx);
            }
        }
        out
    }

    /// Mutable data of a leaf, for re-evaluation after [`Tape::recompute`].
    pub(crate) fn leaf_data_mut(&mut self, leaf: Var) -> &mut [f64] {
        debug_assert!(matches!(self.nodes[leaf.0].op, Op::Leaf));
        self.nodes[leaf.0].value.data_mut()
    }

    /// Re-evaluate `nodes` (ascending) from current input values.
    pub(crate) fn recompute(&mut self, nodes: &[usize]) -> Result<()> {
        for &idx in nodes {
            let mut op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let value = self.compute(&mut op);
            self.nodes[idx].op = op;
            self.nodes[idx].value = value?;
        }
        Ok(())
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if self.rg(v) {
                add_into(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = self.dims(*b).1;
                if self.rg(*a) {
                    let da = matmul_nt(gd, self.value(*b).data(), n, m, k);
                    send(*a, Tensor::matrix(n, k, da)?, grads);
                }
                if self.rg(*b) {
                    let db = matmul_tn(self.value(*a).data(), gd, n, k, m);
                    send(*b, Tensor::matrix(k, m, db)?, grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone(), grads);
                if self.rg(*row) {
                    let m = g.cols();
                    let mut dr = vec![0.0; m];
                    for chunk in gd.chunks(m) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    send(*row, Tensor::matrix(1, m, dr)?, grads);
                }
            }
            Op::MulRow(a, row) => {
                let m = g.cols();
                let (n, _) = self.dims(*a);
                let r = self.value(*row).data();
                let ad = self.value(*a).data();
                if self.rg(*a) {
                    let mut da = gd.to_vec();
                    for chunk in da.chunks_mut(m) {
                        for (d, x) in chunk.iter_mut().zip(r) {
                            *d *= x;
                        }
                    }
                    send(*a, Tensor::matrix(n, m, da)?, grads);
                }
                if self.rg(*row) {
                    let mut dr = vec![0.0; m];
                    for (gc, ac) in gd.chunks(m).zip(ad.chunks(m)) {
                        for j in 0..m {
                            dr[j] += gc[j] * ac[j];
                        }
                    }
                    send(*row, Tensor::matrix(1, m, dr)?, grads);
                }
            }
            Op::Scale(a, s) => {
                let (n, m) = self.dims(*a);
                send(*a, Tensor::matrix(n, m, gd.iter().map(|x| x * s).collect())?, grads);
            }
            Op::ScaleBy(a, s) => {
                let (n, m) = self.dims(*a);
                let sv = self.value(*s).data()[0];
                if self.rg(*a) {
                    send(*a, Tensor::matrix(n, m, gd.iter().map(|x| x * sv).collect())?, grads);
                }
                if self.rg(*s) {
                    let ds = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    send(*s, Tensor::scalar(ds), grads);
                }
            }
            Op::Softmax(a) => {
                let (n, m) = self.dims(*a);
                let y = node.value.data();
                let mut da = vec![0.0; n * m];
                for r in 0..n {
                    let (yr, gr) = (&y[r * m..(r + 1) * m], &gd[r * m..(r + 1) * m]);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..m {
                        da[r * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, Tensor::matrix(n, m, da)?, grads);
            }
            Op::Select(a, idx) => {
                let mut da = Tensor::zeros(self.value(*a).shape());
                da.data_mut()[*idx] = gd[0];
                send(*a, da, grads);
            }
            Op::LayerNorm { x, rstd, .. } => {
                let (n, m) = self.dims(*x);
                let y = node.value.data();
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    let (yr, gr) = (&y[r * m..(r + 1) * m], &gd[r * m..(r + 1) * m]);
                    let mean_g = gr.iter().sum::<f64>() / m as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        dx[r * m + j] = rstd[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                send(*x, Tensor::matrix(n, m, dx)?, grads);
            }
            Op::Gelu(a) => {
                let (n, m) = self.dims(*a);
                let da = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &gg)| gg * gelu_grad(x))
                    .collect();
                send(*a, Tensor::matrix(n, m, da)?, grads);
            }
            Op::Attention(cache) => {
                let (dq, dk, dv) = self.attention_backward(cache, gd)?;
                send(cache.q, dq, grads);
                send(cache.k, dk, grads);
                send(cache.v, dv, grads);
            }
            Op::GroupMean(a, groups) => {
                let (n, m) = self.dims(*a);
                let mut da = vec![0.0; n * m];
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    let gr = &gd[gi * m..(gi + 1) * m];
                    for r in grp.clone() {
                        for (d, x) in da[r * m..(r + 1) * m].iter_mut().zip(gr) {
                            *d += x * inv;
                        }
                    }
                }
                send(*a, Tensor::matrix(n, m, da)?, grads);
            }
            Op::SliceRows(a, start, _) => {
                let (n, m) = self.dims(*a);
                let mut da = vec![0.0; n * m];
                da[start * m..start * m + gd.len()].copy_from_slice(gd);
                send(*a, Tensor::matrix(n, m, da)?, grads);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (pn, pm) = self.dims(p);
                    let chunk = gd[off..off + pn * pm].to_vec();
                    off += pn * pm;
                    send(p, Tensor::matrix(pn, pm, chunk)?, grads);
                }
            }
            Op::GatherRows(a, idx) => {
                let (n, m) = self.dims(*a);
                let mut da = vec![0.0; n * m];
                for (o, &i) in idx.iter().enumerate() {
                    for (d, x) in da[i * m..(i + 1) * m].iter_mut().zip(&gd[o * m..(o + 1) * m]) {
                        *d += x;
                    }
                }
                send(*a, Tensor::matrix(n, m, da)?, grads);
            }
            Op::Huber {
                pred,
                targets,
                delta,
            } => {
                let p = self.value(*pred);
                let scale = gd[0] / targets.len() as f64;
                let dp = p
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(a, b)| scale * huber_elem(a - b, *delta).1)
                    .collect();
                send(*pred, Tensor::new(p.shape().to_vec(), dp)?, grads);
            }
            Op::Sum(a) => {
                send(*a, Tensor::full(self.value(*a).shape(), gd[0]), grads);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, c: &AttentionCache, gd: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
        let (n, d) = self.dims(c.q);
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(c.q).data(),
            self.value(c.k).data(),
            self.value(c.v).data(),
        );
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut pi = 0;
        for seg in &c.segments {
            let len = seg.len();
            let row = |i: usize, off: usize| (seg.start + i) * d + off;
            for h in 0..c.heads {
                let off = h * dh;
                let p = &c.probs[pi];
                pi += 1;
                let mut ds = vec![0.0; len * len];
                for i in 0..len {
                    let go = &gd[row(i, off)..row(i, off) + dh];
                    // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                    let mut dp = vec![0.0; len];
                    for j in 0..len {
                        let vj = &vd[row(j, off)..row(j, off) + dh];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let w = p[i * len + j];
                        for (dvv, gg) in dv[row(j, off)..row(j, off) + dh].iter_mut().zip(go) {
                            *dvv += w * gg;
                        }
                    }
                    let dot: f64 = (0..len).map(|j| p[i * len + j] * dp[j]).sum();
                    for j in 0..len {
                        ds[i * len + j] = p[i * len + j] * (dp[j] - dot) * scale;
                    }
                }
                for i in 0..len {
                    for j in 0..len {
                        let s = ds[i * len + j];
                        if s == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[row(i, off) + t] += s * kd[row(j, off) + t];
                            dk[row(j, off) + t] += s * qd[row(i, off) + t];
                        }
                    }
                }
            }
        }
        Ok((
            Tensor::matrix(n, d, dq)?,
            Tensor::matrix(n, d, dk)?,
            Tensor::matrix(n, d, dv)?,
        ))
    }

    /// Collect gradients for named parameter handles. Trainable parameters
    /// that did not influence the output receive zeros.
    pub fn param_grads(
        &self,
        grads: &Gradients,
        vars: &BTreeMap<String, Var>,
        params: &ParamSet,
    ) -> Grads {
        vars.iter()
            .filter(|(name, _)| params.param(name).is_some_and(|p| p.trainable))
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(self, v)))
            .collect()
    }
}
