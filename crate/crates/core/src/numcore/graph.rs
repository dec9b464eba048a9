//! Reverse-mode tape over a fixed vocabulary of rank-2 ops.
//!
//! Nodes are appended in evaluation order, so walking the node list
//! backwards is a valid reverse topological order.

use std::rc::Rc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{JigsawError, Result};

/// Additive logit for masked attention entries.
pub const MASK_LOGIT: f64 = -1e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined op: the caller computes the forward value and supplies the
/// backward rule.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input given the gradient of the output.
    /// `None` means "no gradient flows to this input".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

/// One contiguous block of tokens that attend among themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSegment {
    pub start: usize,
    pub len: usize,
    /// Row-major `len x len` visibility; `None` means fully visible.
    pub mask: Option<Vec<bool>>,
}

/// Block-diagonal attention structure over a token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub segments: Vec<AttentionSegment>,
}

impl AttentionLayout {
    /// Every token attends to every token.
    pub fn full(n: usize) -> Self {
        AttentionLayout {
            segments: vec![AttentionSegment {
                start: 0,
                len: n,
                mask: None,
            }],
        }
    }

    /// Segments given as `(start, len)`; when `groups` is set, a token only
    /// sees tokens of its segment carrying the same group id.
    pub fn grouped(segments: &[(usize, usize)], groups: Option<&[usize]>) -> Self {
        AttentionLayout {
            segments: segments
                .iter()
                .map(|&(start, len)| AttentionSegment {
                    start,
                    len,
                    mask: groups.map(|g| {
                        let g = &g[start..start + len];
                        let mut m = Vec::with_capacity(len * len);
                        for i in 0..len {
                            for j in 0..len {
                                m.push(g[i] == g[j]);
                            }
                        }
                        m
                    }),
                })
                .collect(),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.segments.iter().map(|s| s.start + s.len).max().unwrap_or(0)
    }

    fn check(&self, n: usize) -> Result<()> {
        let mut covered = vec![false; n];
        for s in &self.segments {
            if s.start + s.len > n {
                return Err(JigsawError::shape("attention layout", &[s.start + s.len], &[n]));
            }
            for c in &mut covered[s.start..s.start + s.len] {
                if *c {
                    return Err(JigsawError::InvalidConfig("attention segments overlap".into()));
                }
                *c = true;
            }
            if let Some(m) = &s.mask {
                if m.len() != s.len * s.len {
                    return Err(JigsawError::shape("attention mask", &[m.len()], &[s.len * s.len]));
                }
                for i in 0..s.len {
                    if !m[i * s.len..(i + 1) * s.len].iter().any(|&v| v) {
                        return Err(JigsawError::InvalidConfig(format!(
                            "attention row {} has no visible key",
                            s.start + i
                        )));
                    }
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(JigsawError::InvalidConfig(
                "attention layout leaves tokens uncovered".into(),
            ));
        }
        Ok(())
    }
}

/// Softmax weights of one attention op: per segment, per head, `len x len` row-major.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub heads: usize,
    pub segments: Vec<(AttentionSegment, Vec<Vec<f64>>)>,
}

impl AttentionWeights {
    /// Weight of query `i` on key `j` (global token indices) for `head`.
    /// Zero when the two tokens are in different segments.
    pub fn weight(&self, head: usize, i: usize, j: usize) -> f64 {
        for (seg, per_head) in &self.segments {
            let range = seg.start..seg.start + seg.len;
            if range.contains(&i) {
                if !range.contains(&j) {
                    return 0.0;
                }
                return per_head[head][(i - seg.start) * seg.len + (j - seg.start)];
            }
        }
        0.0
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttentionLayout>,
        probs: Vec<Vec<Vec<f64>>>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MseTo {
        x: Var,
        target: Tensor,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf that receives gradient but is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// `x + bias` with `bias` of shape `1 x cols` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(JigsawError::shape("add_row", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (a, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *a += b;
            }
        }
        debug_assert_eq!(c, value.cols());
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            0.5 * v * (1.0 + t)
        });
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (each `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.shape() != [1, c] || bv.shape() != [1, c] {
            return Err(JigsawError::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = Tensor::zeros(rows, c);
        let mut out = Tensor::zeros(rows, c);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xh[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout: zeroes entries with probability `p`, scales the rest by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )
        .expect("same length");
        let ng = self.ng(x);
        self.push(value, Op::Dropout { x, mask }, ng)
    }

    /// Multi-head scaled dot-product attention over a block-diagonal layout.
    ///
    /// `q`, `k`, `v` are `tokens x d` with `d` divisible by `heads`; masked
    /// logits get [`MASK_LOGIT`] added before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttentionLayout>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        qv.require_same_shape("attention", kv)?;
        qv.require_same_shape("attention", vv)?;
        let (n, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(JigsawError::InvalidConfig(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        layout.check(n)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(n, d);
        let mut probs = Vec::with_capacity(layout.segments.len());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for seg in &layout.segments {
            let len = seg.len;
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    let row = &mut p[i * len..(i + 1) * len];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &kd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        let mut dot = 0.0;
                        for t in 0..dh {
                            dot += qi[t] * kj[t];
                        }
                        *s = dot * scale;
                        if let Some(m) = &seg.mask {
                            if !m[i * len + j] {
                                *s += MASK_LOGIT;
                            }
                        }
                    }
                    softmax_in_place(row);
                    let o = &mut out.data_mut()[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for (j, &w) in row.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        for t in 0..dh {
                            o[t] += w * vj[t];
                        }
                    }
                }
                per_head.push(p);
            }
            probs.push(per_head);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// Single-head masked attention with one dense `n x n` visibility mask.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(q).rows();
        let layout = AttentionLayout {
            segments: vec![AttentionSegment {
                start: 0,
                len: n,
                mask: Some(mask.to_vec()),
            }],
        };
        self.attention(q, k, v, 1, Rc::new(layout))
    }

    /// Softmax weights recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<AttentionWeights> {
        match &self.nodes[v.0].op {
            Op::Attention {
                heads,
                layout,
                probs,
                ..
            } => Some(AttentionWeights {
                heads: *heads,
                segments: layout.segments.iter().cloned().zip(probs.iter().cloned()).collect(),
            }),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(JigsawError::shape("gather_rows", xv.shape(), &[bad]));
        }
        let value = xv.gather_rows(index);
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(JigsawError::shape("slice_cols", xv.shape(), &[start + len]));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::matrix(rows, len, data), Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(p) = parts.iter().find(|&&p| self.value(p).rows() != rows) {
            return Err(JigsawError::shape("concat_cols", &[rows], self.value(*p).shape()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len().max(1) as f64);
        let ng = self.ng(x);
        self.push(value, Op::Mean(x), ng)
    }

    /// Mean squared difference to a constant target.
    pub fn mse_to(&mut self, x: Var, target: Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.require_same_shape("mse", &target)?;
        let n = xv.len().max(1) as f64;
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s / n), Op::MseTo { x, target }, ng))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&i| self.ng(i));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(JigsawError::shape("backward", out.shape(), &[1, 1]));
        }
        if !out.all_finite() {
            return Err(JigsawError::Numerical(format!("loss is {}", out.item())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::matrix(out.rows(), out.cols(), vec![1.0]));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Sums gradients of every parameter node, in store order (zeros for unused parameters).
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .values()
            .map(|t| Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("shape"))
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    out[id.index()].add_assign(g);
                }
            }
        }
        out
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut da);
                    accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut db);
                    accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.map(|v| -v));
            }
            Op::AddRow(x, b) => {
                self.send(grads, *x, || g.clone());
                self.send(grads, *b, || {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    Tensor::matrix(1, c, db)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.send(grads, *a, || g.zip_map(bv, |x, y| x * y).expect("shape"));
                self.send(grads, *b, || g.zip_map(av, |x, y| x * y).expect("shape"));
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.send(grads, *x, || g.map(|v| v * s));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.send(grads, *x, || {
                    g.zip_map(xv, |gv, v| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .expect("shape")
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.send(grads, *x, || {
                    g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 }).expect("shape")
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                self.send(grads, *x, || {
                    let mut dx = g.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = yr[j] * (gr[j] - dot);
                        }
                    }
                    dx
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (rows, c) = (xhat.rows(), xhat.cols());
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.ng(*gamma) {
                        accumulate(grads, *gamma, Tensor::matrix(1, c, dg));
                    }
                    if self.ng(*beta) {
                        accumulate(grads, *beta, Tensor::matrix(1, c, db));
                    }
                }
                self.send(grads, *x, || {
                    let mut dx = Tensor::zeros(rows, c);
                    let nf = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv.data()[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xr[j];
                        }
                        let inv = inv_std[r];
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv / nf * (nf * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    dx
                });
            }
            Op::Dropout { x, mask } => {
                self.send(grads, *x, || {
                    Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
                    )
                    .expect("shape")
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, layout, probs),
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                self.send(grads, *x, || {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (d, v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    dx
                });
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let start = *start;
                self.send(grads, *x, || {
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    let len = g.cols();
                    for r in 0..g.rows() {
                        dx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                    }
                    dx
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.send(grads, p, || {
                        let mut dp = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            dp.extend_from_slice(&g.row(r)[off..off + pc]);
                        }
                        Tensor::matrix(g.rows(), pc, dp)
                    });
                    off += pc;
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let gv = g.item();
                self.send(grads, *x, || Tensor::full(xv.rows(), xv.cols(), gv));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gv = g.item() / xv.len().max(1) as f64;
                self.send(grads, *x, || Tensor::full(xv.rows(), xv.cols(), gv));
            }
            Op::MseTo { x, target } => {
                let xv = self.value(*x);
                let f = 2.0 * g.item() / xv.len().max(1) as f64;
                self.send(grads, *x, || xv.zip_map(target, |a, b| f * (a - b)).expect("shape"));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (&i, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        if self.ng(i) {
                            accumulate(grads, i, gi);
                        }
                    }
                }
            }
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.ng(v) {
            accumulate(grads, v, f());
        }
    }

    fn attention_backward(
        &self,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        layout: &AttentionLayout,
        probs: &[Vec<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        for (seg, per_head) in layout.segments.iter().zip(probs) {
            let len = seg.len;
            let mut ds = vec![0.0; len];
            for (h, p) in per_head.iter().enumerate() {
                let off = h * dh;
                for i in 0..len {
                    let gi = (seg.start + i) * d + off;
                    let go = &gd[gi..gi + dh];
                    let prow = &p[i * len..(i + 1) * len];
                    // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                    let mut dot_pd = 0.0;
                    for j in 0..len {
                        let w = prow[j];
                        let vj = (seg.start + j) * d + off;
                        let mut dp = 0.0;
                        for t in 0..dh {
                            dp += go[t] * vd[vj + t];
                        }
                        ds[j] = dp;
                        dot_pd += w * dp;
                        if w != 0.0 {
                            for t in 0..dh {
                                dv[vj + t] += w * go[t];
                            }
                        }
                    }
                    // dS_ij = P_ij (dP_ij - sum_l P_il dP_il)
                    let qi = (seg.start + i) * d + off;
                    for j in 0..len {
                        let w = prow[j];
                        if w == 0.0 {
                            continue;
                        }
                        let s = w * (ds[j] - dot_pd) * scale;
                        let kj = (seg.start + j) * d + off;
                        for t in 0..dh {
                            dq[qi + t] += s * kd[kj + t];
                            dk[kj + t] += s * qd[qi + t];
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            accumulate(grads, q, Tensor::matrix(n, d, dq));
        }
        if self.ng(k) {
            accumulate(grads, k, Tensor::matrix(n, d, dk));
        }
        if self.ng(v) {
            accumulate(grads, v, Tensor::matrix(n, d, dv));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(2, 5, 3.7));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_with_identity_is_unchanged() {
        let mut g = Graph::new();
        let a = Tensor::randn(3, 4, &mut rng());
        let x = g.constant(a.clone());
        let i = g.constant(Tensor::identity(4));
        let y = g.matmul(x, i).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let xv = Tensor::randn(3, 2, &mut rng());
        let x = g.input(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let dx = grads.get(x).unwrap();
        for (d, v) in dx.data().iter().zip(xv.data()) {
            assert!((d - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(JigsawError::Shape { .. })));
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_weights_are_zero() {
        let mut r = rng();
        let mut g = Graph::new();
        let n = 7;
        let q = g.constant(Tensor::randn(n, 8, &mut r));
        let k = g.constant(Tensor::randn(n, 8, &mut r));
        let v = g.constant(Tensor::randn(n, 8, &mut r));
        let mask: Vec<bool> = (0..n * n).map(|i| i % n == i / n || (i * 7919) % 3 == 0).collect();
        let out = g.masked_attention(q, k, v, &mask).unwrap();
        let w = g.attention_weights(out).unwrap();
        for i in 0..n {
            let s: f64 = (0..n).map(|j| w.weight(0, i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in 0..n {
                if !mask[i * n + j] {
                    assert_eq!(w.weight(0, i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 2));
        assert!(g.masked_attention(x, x, x, &[true, true, false, false]).is_err());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(5, 64, &mut r).map(|v| 3.0 * v + 1.5));
        let gamma = g.constant(Tensor::full(1, 64, 1.0));
        let beta = g.constant(Tensor::zeros(1, 64));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let yv = g.value(y);
        for row in 0..5 {
            let rr = yv.row(row);
            let mean = rr.iter().sum::<f64>() / 64.0;
            let var = rr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(2, 2, 1.0));
        let y = g.dropout(x, 0.0, &mut rng());
        assert_eq!(x, y);
    }

    /// Every primitive against central differences, on random small shapes.
    #[test]
    fn primitives_pass_gradient_check() {
        use crate::numcore::ParamStore;
        let mut r = rng();
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::randn(4, 6, &mut r)).unwrap();
        let b = store.add("b", Tensor::randn(6, 6, &mut r)).unwrap();
        let bias = store.add("bias", Tensor::randn(1, 6, &mut r)).unwrap();
        let gamma = store.add("gamma", Tensor::randn(1, 6, &mut r)).unwrap();
        let beta = store.add("beta", Tensor::randn(1, 6, &mut r)).unwrap();
        let target = Tensor::randn(4, 6, &mut r);
        let layout = Rc::new(AttentionLayout::grouped(&[(0, 3), (3, 1)], Some(&[0, 1, 0, 2])));
        let dropout_seed = 5;
        let f = |g: &mut Graph, s: &ParamStore| -> Result<Var> {
            let x = g.param(s, a);
            let w = g.param(s, b);
            let bb = g.param(s, bias);
            let h = g.linear(x, w, Some(bb))?;
            let h = g.gelu(h);
            let ga = g.param(s, gamma);
            let be = g.param(s, beta);
            let h = g.layer_norm(h, ga, be, 1e-5)?;
            let h2 = g.mul(h, h)?;
            let vv = g.scale(h, -1.3);
            let att = g.attention(h, h2, vv, 2, layout.clone())?;
            let sm = g.softmax(att);
            let cat = g.concat_cols(&[sm, h])?;
            let sl = g.slice_cols(cat, 3, 6)?;
            let gathered = g.gather_rows(sl, &[0, 0, 3, 2])?;
            let mut dr = ChaCha8Rng::seed_from_u64(dropout_seed);
            let dropped = g.dropout(gathered, 0.3, &mut dr);
            let diff = g.sub(dropped, h)?;
            let scaled = g.scale(diff, 0.7);
            let m = g.mse_to(scaled, target.clone())?;
            let r = g.relu(gathered);
            let rs = g.mean(r);
            let total = g.add(m, rs)?;
            Ok(total)
        };
        let report = grad_check(&mut store, f, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.max_rel_error < 1e-6, "{report}");
    }
}
