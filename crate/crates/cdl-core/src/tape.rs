//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are recorded in
//! topological order (parents always precede children), so the backward pass
//! is a single reverse sweep that visits each node exactly once. Gradients
//! only flow through nodes whose ancestry contains a trainable parameter;
//! frozen weights and cached teacher outputs enter as constants and cost
//! nothing at backward time.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CdlError, Result};
use crate::kernels::{dot, mm_nn, mm_nt, mm_tn};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax_temp_into, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on one specific tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TensorId {
    tape: u64,
    idx: u32,
}

/// Sigmoid-approximation coefficient: gelu(x) ~= x * sigmoid(1.702 x).
const GELU_S: f64 = 1.702;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(u32, u32),
    AddBias(u32, u32),
    Mul(u32, u32),
    /// Elementwise product with a scalar node (broadcast).
    MulScalar(u32, u32),
    /// a * x + b with constant coefficients; only the multiplier matters in
    /// the backward pass.
    Affine(u32, f64),
    MatMul(u32, u32),
    /// a @ b^T with b stored row-major as (n, k).
    MatMulNT(u32, u32),
    Gelu { x: u32, sig: Vec<f64> },
    Sqrt(u32),
    Sigmoid(u32),
    LayerNorm {
        x: u32,
        gamma: u32,
        beta: u32,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Softmax over the last dimension of a 1-D or 2-D input.
    Softmax(u32),
    ConcatRows(Vec<u32>),
    ConcatCols(Vec<u32>),
    Concat1D(Vec<u32>),
    Reshape(u32),
    SliceRows { x: u32, start: usize },
    SliceCols { x: u32, start: usize },
    Gather { x: u32, idx: Vec<usize> },
    /// Replace inactive entries with a large negative constant.
    MaskSet { x: u32, active: Vec<bool> },
    /// All attention heads in one node: per head, scaled scores, row
    /// softmax, and the value mix. Saves the post-softmax rows.
    AttnCore {
        q: u32,
        k: u32,
        v: u32,
        heads: usize,
        scale: f64,
        probs: Vec<Tensor>,
    },
    MeanAll(u32),
    SumAll(u32),
    CosineSim(u32, u32),
    KlDiv { p: u32, q: u32 },
    CrossEntropy { logits: u32, target: usize },
    Mse(u32, u32),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients keyed by parameter id, produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<ParamId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }
}

#[derive(Default)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, TensorId>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        assert_eq!(id.tape, self.id, "tensor handle from a different tape");
        &self.nodes[id.idx as usize].value
    }

    fn check(&self, id: TensorId) -> u32 {
        assert_eq!(id.tape, self.id, "tensor handle from a different tape");
        id.idx
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, param: Option<ParamId>) -> TensorId {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad, param });
        TensorId { tape: self.id, idx }
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.idx as usize].requires_grad
    }

    /// Records a constant; gradients never flow into it.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(t.clone(), Op::Leaf, false, None)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(&Tensor::scalar(v))
    }

    /// Records a parameter leaf. Gradients flow iff the parameter is
    /// trainable. Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let trainable = store.trainable(id);
        let node = self.push(store.value(id).clone(), Op::Leaf, trainable, Some(id));
        self.param_nodes.insert(id, node);
        node
    }

    /// Records a parameter as a constant regardless of its trainable flag
    /// (evaluation mode).
    pub fn param_detached(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Leaf, false, Some(id));
        self.param_nodes.insert(id, node);
        node
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ai, bi) = (self.check(a), self.check(b));
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(ai, bi), rg, None)
    }

    /// (R, C) + (C,) broadcast over rows.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (ai, bi) = (self.check(a), self.check(bias));
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.ncols();
        assert_eq!(tb.numel(), c, "bias width mismatch");
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddBias(ai, bi), rg, None)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ai, bi) = (self.check(a), self.check(b));
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(ai, bi), rg, None)
    }

    /// x * s where s is a scalar node (differentiable in both).
    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> TensorId {
        let (xi, si) = (self.check(x), self.check(s));
        assert!(self.value(s).is_scalar(), "mul_scalar needs a scalar node");
        let sv = self.value(s).item();
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * sv).collect();
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::MulScalar(xi, si), rg, None)
    }

    /// a * x + b with constant a, b.
    pub fn affine(&mut self, x: TensorId, a: f64, b: f64) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| a * v + b).collect();
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Affine(xi, a), rg, None)
    }

    pub fn scale(&mut self, x: TensorId, a: f64) -> TensorId {
        self.affine(x, a, 0.0)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    // ── matrix products ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ai, bi) = (self.check(a), self.check(b));
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.nrows(), ta.ncols());
        let (k2, n) = (tb.nrows(), tb.ncols());
        assert_eq!(k, k2, "matmul inner dim mismatch: {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        mm_nn(ta.data(), tb.data(), m, k, n, &mut data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(vec![m, n], data), Op::MatMul(ai, bi), rg, None)
    }

    /// a @ b^T where b is stored as (n, k).
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ai, bi) = (self.check(a), self.check(b));
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.nrows(), ta.ncols());
        let (n, k2) = (tb.nrows(), tb.ncols());
        assert_eq!(k, k2, "matmul_nt inner dim mismatch: {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        mm_nt(ta.data(), tb.data(), m, k, n, &mut data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(vec![m, n], data), Op::MatMulNT(ai, bi), rg, None)
    }

    // ── nonlinearities ─────────────────────────────────────────────────

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let mut sig = Vec::with_capacity(tx.numel());
        let data = tx
            .data()
            .iter()
            .map(|&v| {
                let s = 1.0 / (1.0 + (-GELU_S * v).exp());
                sig.push(s);
                v * s
            })
            .collect();
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x: xi, sig }, rg, None)
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        assert!(tx.data().iter().all(|v| *v >= 0.0), "sqrt of negative value");
        let data = tx.data().iter().map(|v| v.sqrt()).collect();
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Sqrt(xi), rg, None)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(xi), rg, None)
    }

    /// Normalizes the last dimension of a 1-D vector or each row of a 2-D
    /// matrix, then applies the affine (gamma, beta).
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let (xi, gi, bi) = (self.check(x), self.check(gamma), self.check(beta));
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        let tg = self.value(gamma);
        let tb = self.value(beta);
        assert_eq!(tg.numel(), cols, "layer_norm gamma width");
        assert_eq!(tb.numel(), cols, "layer_norm beta width");
        let mut data = vec![0.0; rows * cols];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let out_row = &mut data[r * cols..(r + 1) * cols];
            for j in 0..cols {
                out_row[j] = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm { x: xi, gamma: gi, beta: bi, mean: means, rstd: rstds },
            rg,
            None,
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let (rows, cols) = rows_cols(tx);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_temp_into(&tx.data()[r * cols..(r + 1) * cols], 1.0, &mut data[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Softmax(xi), rg, None)
    }

    /// softmax(x / tau). Errors on non-positive temperature or non-finite
    /// logits.
    pub fn softmax_temp(&mut self, x: TensorId, tau: f64) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(CdlError::Contract(format!("temperature must be positive, got {tau}")));
        }
        if !self.value(x).is_finite() {
            return Err(CdlError::Numeric("softmax over non-finite logits".into()));
        }
        let scaled = self.scale(x, 1.0 / tau);
        Ok(self.softmax(scaled))
    }

    // ── shape surgery ──────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let idxs: Vec<u32> = parts.iter().map(|&p| self.check(p)).collect();
        let cols = self.value(parts[0]).ncols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.ncols(), cols, "concat_rows column mismatch");
            rows += t.nrows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(vec![rows, cols], data), Op::ConcatRows(idxs), rg, None)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let idxs: Vec<u32> = parts.iter().map(|&p| self.check(p)).collect();
        let rows = self.value(parts[0]).nrows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.nrows(), rows, "concat_cols row mismatch");
            let c = t.ncols();
            for r in 0..rows {
                data[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(t.row(r));
            }
            col_off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(vec![rows, total_cols], data), Op::ConcatCols(idxs), rg, None)
    }

    /// Concatenates 1-D vectors (scalars included) into one vector.
    pub fn concat_1d(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let idxs: Vec<u32> = parts.iter().map(|&p| self.check(p)).collect();
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(vec![n], data), Op::Concat1D(idxs), rg, None)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        assert_eq!(
            tx.numel(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let out = Tensor::from_vec(shape.to_vec(), tx.data().to_vec());
        let rg = self.rg(x);
        self.push(out, Op::Reshape(xi), rg, None)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let cols = tx.ncols();
        assert!(start + len <= tx.nrows(), "slice_rows out of range");
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(vec![len, cols], data), Op::SliceRows { x: xi, start }, rg, None)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let (rows, cols) = (tx.nrows(), tx.ncols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&tx.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(vec![rows, len], data), Op::SliceCols { x: xi, start }, rg, None)
    }

    /// Picks elements of a vector by index (duplicates allowed).
    pub fn gather(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let v = tx.as_vector().expect("gather expects a vector");
        let data: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let n = data.len();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(vec![n], data), Op::Gather { x: xi, idx: idx.to_vec() }, rg, None)
    }

    /// Replaces entries where `active` is false with `neg` (a -inf
    /// surrogate); masked entries receive no gradient.
    pub fn mask_set(&mut self, x: TensorId, active: &[bool], neg: f64) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        assert_eq!(tx.numel(), active.len(), "mask length mismatch");
        let data = tx
            .data()
            .iter()
            .zip(active)
            .map(|(&v, &a)| if a { v } else { neg })
            .collect();
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::MaskSet { x: xi, active: active.to_vec() }, rg, None)
    }

    /// Multi-head attention core: splits `q` (T, D), `k`, `v` (S, D) into
    /// `heads` column groups, runs scaled-dot-product attention per head and
    /// re-merges the outputs, all in one node. The post-softmax rows are
    /// saved per head and readable via [`Tape::attn_probs`].
    pub fn attn_core(&mut self, q: TensorId, k: TensorId, v: TensorId, heads: usize) -> TensorId {
        let (qi, ki, vi) = (self.check(q), self.check(k), self.check(v));
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (tq.nrows(), tq.ncols());
        let s = tk.nrows();
        assert_eq!(tk.ncols(), d, "key width mismatch");
        assert_eq!(tv.nrows(), s, "key/value row mismatch");
        assert_eq!(tv.ncols(), d, "value width mismatch");
        assert_eq!(d % heads, 0, "dim {d} not divisible by {heads} heads");
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(heads);
        let mut scores = vec![0.0; s];
        for h in 0..heads {
            let off = h * hd;
            let mut p = vec![0.0; t * s];
            for i in 0..t {
                let q_row = &qd[i * d + off..i * d + off + hd];
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = dot(q_row, &kd[j * d + off..j * d + off + hd]) * scale;
                }
                softmax_temp_into(&scores, 1.0, &mut p[i * s..(i + 1) * s]);
                let out_row = &mut out[i * d + off..i * d + off + hd];
                for j in 0..s {
                    let w = p[i * s + j];
                    for (o, &vv) in out_row.iter_mut().zip(&vd[j * d + off..j * d + off + hd]) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(Tensor::from_vec(vec![t, s], p));
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::from_vec(vec![t, d], out),
            Op::AttnCore { q: qi, k: ki, v: vi, heads, scale, probs },
            rg,
            None,
        )
    }

    /// Saved per-head post-softmax attention rows of an [`Tape::attn_core`]
    /// node.
    pub fn attn_probs(&self, id: TensorId) -> Option<&[Tensor]> {
        let idx = self.check(id);
        match &self.nodes[idx as usize].op {
            Op::AttnCore { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ── reductions and losses ──────────────────────────────────────────

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let xi = self.check(x);
        let tx = self.value(x);
        let v = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::MeanAll(xi), rg, None)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let xi = self.check(x);
        let v = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::SumAll(xi), rg, None)
    }

    /// Cosine similarity of two vectors; errors on zero-norm input.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ai, bi) = (self.check(a), self.check(b));
        let va = self.value(a).as_vector().ok_or_else(|| CdlError::Contract("cosine_sim expects vectors".into()))?;
        let vb = self.value(b).as_vector().ok_or_else(|| CdlError::Contract("cosine_sim expects vectors".into()))?;
        let c = crate::tensor::cosine(va, vb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::CosineSim(ai, bi), rg, None))
    }

    /// KL divergence sum_i p_i ln(p_i / q_i) of two probability vectors.
    pub fn kl_div(&mut self, p: TensorId, q: TensorId) -> TensorId {
        let (pi, qi) = (self.check(p), self.check(q));
        let tp = self.value(p);
        let tq = self.value(q);
        assert_eq!(tp.numel(), tq.numel(), "kl_div length mismatch");
        let mut v = 0.0;
        for (&pv, &qv) in tp.data().iter().zip(tq.data()) {
            if pv > 0.0 {
                v += pv * (pv / qv).ln();
            }
        }
        let rg = self.rg(p) || self.rg(q);
        self.push(Tensor::scalar(v), Op::KlDiv { p: pi, q: qi }, rg, None)
    }

    /// Cross-entropy of a logit vector against a class index, computed via a
    /// stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> TensorId {
        let li = self.check(logits);
        let tl = self.value(logits);
        let v = tl.as_vector().expect("cross_entropy expects a logit vector");
        assert!(target < v.len(), "target class out of range");
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let rg = self.rg(logits);
        self.push(Tensor::scalar(lse - v[target]), Op::CrossEntropy { logits: li, target }, rg, None)
    }

    /// Mean squared error over all elements of two same-shape tensors.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ai, bi) = (self.check(a), self.check(b));
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let n = ta.numel() as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::Mse(ai, bi), rg, None)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns a gradient for every
    /// trainable parameter recorded on this tape (zero when the loss does
    /// not depend on it); frozen parameters are absent.
    pub fn backward(&self, loss: TensorId) -> Result<GradMap> {
        if loss.tape != self.id {
            return Err(CdlError::Tape(
                "loss tensor is detached or belongs to another tape".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(CdlError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.idx as usize].requires_grad {
            grads[loss.idx as usize] = Some(vec![1.0]);
        }

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if node.param.is_some() {
                grads[i] = Some(g); // keep leaf grads for the map
            }
        }

        let mut map = GradMap::default();
        for (&pid, &node) in &self.param_nodes {
            let n = &self.nodes[node.idx as usize];
            if !n.requires_grad {
                continue; // frozen parameters stay out of the map
            }
            let shape = n.value.shape().to_vec();
            let g = grads[node.idx as usize]
                .take()
                .unwrap_or_else(|| vec![0.0; n.value.numel()]);
            map.insert(pid, Tensor::from_vec(shape, g));
        }
        Ok(map)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], idx: u32, contribution: impl FnOnce(&mut [f64])) {
        let i = idx as usize;
        if !self.nodes[i].requires_grad {
            return;
        }
        let buf = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].value.numel()]);
        contribution(buf);
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |idx: u32| self.nodes[idx as usize].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |buf| axpy_all(buf, g));
                self.accum(grads, *b, |buf| axpy_all(buf, g));
            }
            Op::AddBias(a, b) => {
                self.accum(grads, *a, |buf| axpy_all(buf, g));
                let c = self.nodes[*b as usize].value.numel();
                self.accum(grads, *b, |buf| {
                    for row in g.chunks(c) {
                        for (bv, gv) in buf.iter_mut().zip(row) {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accum(grads, *a, |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(vb) {
                        *o += gv * bv;
                    }
                });
                self.accum(grads, *b, |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(va) {
                        *o += gv * av;
                    }
                });
            }
            Op::MulScalar(x, s) => {
                let sv = val(*s)[0];
                let vx = val(*x);
                self.accum(grads, *x, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += gv * sv;
                    }
                });
                self.accum(grads, *s, |buf| buf[0] += dot(g, vx));
            }
            Op::Affine(x, a) => {
                let a = *a;
                self.accum(grads, *x, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o += a * gv;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a as usize].value.nrows(), self.nodes[*a as usize].value.ncols());
                let n = self.nodes[*b as usize].value.ncols();
                let (va, vb) = (val(*a), val(*b));
                self.accum(grads, *a, |buf| mm_nt(g, vb, m, n, k, buf));
                self.accum(grads, *b, |buf| mm_tn(va, g, m, k, n, buf));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.nodes[*a as usize].value.nrows(), self.nodes[*a as usize].value.ncols());
                let n = self.nodes[*b as usize].value.nrows();
                let (va, vb) = (val(*a), val(*b));
                self.accum(grads, *a, |buf| mm_nn(g, vb, m, n, k, buf));
                self.accum(grads, *b, |buf| mm_tn(g, va, m, n, k, buf));
            }
            Op::Gelu { x, sig } => {
                let vx = val(*x);
                self.accum(grads, *x, |buf| {
                    for (((o, gv), &xv), &s) in buf.iter_mut().zip(g).zip(vx).zip(sig) {
                        let d = s + xv * s * (1.0 - s) * GELU_S;
                        *o += gv * d;
                    }
                });
            }
            Op::Sqrt(x) => {
                let vy = node.value.data();
                self.accum(grads, *x, |buf| {
                    for ((o, gv), &yv) in buf.iter_mut().zip(g).zip(vy) {
                        if yv > 0.0 {
                            *o += gv * 0.5 / yv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let vy = node.value.data();
                self.accum(grads, *x, |buf| {
                    for ((o, gv), &yv) in buf.iter_mut().zip(g).zip(vy) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let vx = val(*x);
                let vg = val(*gamma);
                let cols = vg.len();
                let rows = vx.len() / cols;
                self.accum(grads, *beta, |buf| {
                    for row in g.chunks(cols) {
                        for (o, gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
                self.accum(grads, *gamma, |buf| {
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let xrow = &vx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            buf[j] += grow[j] * (xrow[j] - mean[r]) * rstd[r];
                        }
                    }
                });
                self.accum(grads, *x, |buf| {
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let xrow = &vx[r * cols..(r + 1) * cols];
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        let mut sum_gg = 0.0;
                        let mut sum_ggx = 0.0;
                        for j in 0..cols {
                            let gg = grow[j] * vg[j];
                            let xh = (xrow[j] - mean[r]) * rstd[r];
                            sum_gg += gg;
                            sum_ggx += gg * xh;
                        }
                        let inv = 1.0 / cols as f64;
                        for j in 0..cols {
                            let gg = grow[j] * vg[j];
                            let xh = (xrow[j] - mean[r]) * rstd[r];
                            out[j] += rstd[r] * (gg - inv * sum_gg - xh * inv * sum_ggx);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let vy = node.value.data();
                let tx = &self.nodes[*x as usize].value;
                let (rows, cols) = rows_cols(tx);
                self.accum(grads, *x, |buf| {
                    for r in 0..rows {
                        let y = &vy[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dotgy = dot(grow, y);
                        let out = &mut buf[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            out[j] += y[j] * (grow[j] - dotgy);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) | Op::Concat1D(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p as usize].value.numel();
                    let seg = &g[off..off + n];
                    self.accum(grads, p, |buf| axpy_all(buf, seg));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.nrows();
                let total = node.value.ncols();
                let mut col_off = 0;
                for &p in parts {
                    let c = self.nodes[p as usize].value.ncols();
                    self.accum(grads, p, |buf| {
                        for r in 0..rows {
                            let src = &g[r * total + col_off..r * total + col_off + c];
                            for (o, gv) in buf[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    });
                    col_off += c;
                }
            }
            Op::Reshape(x) => {
                self.accum(grads, *x, |buf| axpy_all(buf, g));
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.ncols();
                let start = *start;
                self.accum(grads, *x, |buf| {
                    for (o, gv) in buf[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = node.value.ncols();
                let rows = node.value.nrows();
                let cols = self.nodes[*x as usize].value.ncols();
                let start = *start;
                self.accum(grads, *x, |buf| {
                    for r in 0..rows {
                        let src = &g[r * len..(r + 1) * len];
                        for (o, gv) in buf[r * cols + start..r * cols + start + len].iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                self.accum(grads, *x, |buf| {
                    for (&i, gv) in idx.iter().zip(g) {
                        buf[i] += gv;
                    }
                });
            }
            Op::MaskSet { x, active } => {
                self.accum(grads, *x, |buf| {
                    for ((o, gv), &a) in buf.iter_mut().zip(g).zip(active) {
                        if a {
                            *o += gv;
                        }
                    }
                });
            }
            Op::AttnCore { q, k, v, heads, scale, probs } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let t = node.value.nrows();
                let d = node.value.ncols();
                let s = self.nodes[*k as usize].value.nrows();
                let heads = *heads;
                let hd = d / heads;
                // dV[j] += sum_i p[i,j] g[i] per head chunk
                self.accum(grads, *v, |buf| {
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * hd;
                        let pd = p.data();
                        for i in 0..t {
                            let grow = &g[i * d + off..i * d + off + hd];
                            for j in 0..s {
                                let w = pd[i * s + j];
                                for (o, &gv) in
                                    buf[j * d + off..j * d + off + hd].iter_mut().zip(grow)
                                {
                                    *o += w * gv;
                                }
                            }
                        }
                    }
                });
                // Scores gradient through the row softmax, scale folded in.
                let mut dz = vec![0.0; heads * t * s];
                for (h, p) in probs.iter().enumerate() {
                    let off = h * hd;
                    let pd = p.data();
                    for i in 0..t {
                        let grow = &g[i * d + off..i * d + off + hd];
                        let base = h * t * s + i * s;
                        for j in 0..s {
                            dz[base + j] = dot(grow, &vv[j * d + off..j * d + off + hd]);
                        }
                        let mut mix = 0.0;
                        for j in 0..s {
                            mix += dz[base + j] * pd[i * s + j];
                        }
                        for j in 0..s {
                            dz[base + j] = pd[i * s + j] * (dz[base + j] - mix) * scale;
                        }
                    }
                }
                self.accum(grads, *q, |buf| {
                    for h in 0..heads {
                        let off = h * hd;
                        for i in 0..t {
                            let out = &mut buf[i * d + off..i * d + off + hd];
                            for j in 0..s {
                                let w = dz[h * t * s + i * s + j];
                                for (o, &kv) in out.iter_mut().zip(&vk[j * d + off..j * d + off + hd]) {
                                    *o += w * kv;
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *k, |buf| {
                    for h in 0..heads {
                        let off = h * hd;
                        for i in 0..t {
                            let qrow = &vq[i * d + off..i * d + off + hd];
                            for j in 0..s {
                                let w = dz[h * t * s + i * s + j];
                                for (o, &qv) in
                                    buf[j * d + off..j * d + off + hd].iter_mut().zip(qrow)
                                {
                                    *o += w * qv;
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[*x as usize].value.numel() as f64;
                let gv = g[0] / n;
                self.accum(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.accum(grads, *x, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::CosineSim(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let na = dot(va, va).sqrt();
                let nb = dot(vb, vb).sqrt();
                let c = node.value.item();
                let gv = g[0];
                self.accum(grads, *a, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        *o += gv * (vb[j] / (na * nb) - c * va[j] / (na * na));
                    }
                });
                self.accum(grads, *b, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        *o += gv * (va[j] / (na * nb) - c * vb[j] / (nb * nb));
                    }
                });
            }
            Op::KlDiv { p, q } => {
                let (vp, vq) = (val(*p), val(*q));
                let gv = g[0];
                self.accum(grads, *p, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        if vp[j] > 0.0 {
                            *o += gv * ((vp[j] / vq[j]).ln() + 1.0);
                        }
                    }
                });
                self.accum(grads, *q, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        if vp[j] > 0.0 {
                            *o -= gv * vp[j] / vq[j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, target } => {
                let vz = val(*logits);
                let gv = g[0];
                let target = *target;
                let mut probs = vec![0.0; vz.len()];
                softmax_temp_into(vz, 1.0, &mut probs);
                self.accum(grads, *logits, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        let ind = if j == target { 1.0 } else { 0.0 };
                        *o += gv * (probs[j] - ind);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = va.len() as f64;
                let gv = g[0];
                self.accum(grads, *a, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        *o += gv * 2.0 * (va[j] - vb[j]) / n;
                    }
                });
                self.accum(grads, *b, |buf| {
                    for (j, o) in buf.iter_mut().enumerate() {
                        *o -= gv * 2.0 * (va[j] - vb[j]) / n;
                    }
                });
            }
        }
    }
}

fn axpy_all(buf: &mut [f64], g: &[f64]) {
    debug_assert_eq!(buf.len(), g.len());
    for (o, gv) in buf.iter_mut().zip(g) {
        *o += gv;
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => panic!("expected rank 1 or 2 tensor, got {s:?}"),
    }
}
