//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward
//! pass. Every op appends a node holding its output value and enough saved
//! state to run its backward rule. Nodes are appended in evaluation order,
//! so the node vector is already a topological order and backward is a
//! single reverse sweep.

use std::collections::HashMap;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the rational denominator folds its polynomial into a positive value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenominatorForm {
    /// `1 + |Σ b_i x^i|`
    AbsOfSum,
    /// `1 + Σ |b_i x^i|`
    SumOfAbs,
}

#[derive(Debug, Clone, Copy)]
pub struct RopeSpec {
    pub pos0: usize,
    pub n_heads: usize,
    pub base: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Recip(Var),
    Sum(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax(Var, usize),
    RmsNorm(Var, Var, Vec<f64>),
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Rope(Var, RopeSpec),
    Rational(Var, Var, Var, DenominatorForm),
    CrossEntropy(Var, Vec<Option<usize>>, Tensor),
}

enum Value<'s> {
    Owned(Tensor),
    Param(&'s Tensor),
}

struct Node<'s> {
    value: Value<'s>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<'s> Graph<'s> {
    /// Graph that records gradients for trainable parameters.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Graph with gradients disabled everywhere.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: Value::Param(&p.value),
            op: Op::Leaf,
            needs_grad: self.grad_enabled && p.trainable,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul_nt [{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::from_parts(m, n, out), Op::MatMulNT(a, b), &[a, b], "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.rows(), ta.cols(), data);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// `x[n×d] + row[1×d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(Error::dim(format!("add_row {:?} + {:?}", tx.shape(), tr.shape())));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % c])
            .collect();
        let out = Tensor::from_parts(tx.rows(), c, data);
        self.push(out, Op::AddRow(x, row), &[x, row], "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.rows(), ta.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_parts(ta.rows(), ta.cols(), data);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    /// Multiply every element of `a` by the `[1×1]` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * sv).collect();
        let out = Tensor::from_parts(ta.rows(), ta.cols(), data);
        self.push(out, Op::ScaleBy(a, s), &[a, s], "scale_by")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| 1.0 / x).collect();
        let out = Tensor::from_parts(ta.rows(), ta.cols(), data);
        self.push(out, Op::Recip(a), &[a], "recip")
    }

    /// Sum of all elements, `[1×1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over the row axis, `[n×d] -> [1×d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(ta.row_slice(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::row(out), Op::MeanRows(a), &[a], "mean_rows")
    }

    /// Max over the row axis, `[n×d] -> [1×d]`; ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut arg = vec![0usize; c];
        let mut out = ta.row_slice(0).to_vec();
        for i in 1..r {
            for (j, v) in ta.row_slice(i).iter().enumerate() {
                if *v > out[j] {
                    out[j] = *v;
                    arg[j] = i;
                }
            }
        }
        self.push(Tensor::row(out), Op::MaxRows(a, arg), &[a], "max_rows")
    }

    /// Gather rows by index (embedding lookup, last-token selection).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if idx.is_empty() {
            return Err(Error::dim("select_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::dim(format!("row {bad} out of {}", ta.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * ta.cols());
        for &i in idx {
            data.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::from_parts(idx.len(), ta.cols(), data);
        self.push(out, Op::SelectRows(a, idx.to_vec()), &[a], "select_rows")
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if idx.is_empty() {
            return Err(Error::dim("select_cols with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= ta.cols()) {
            return Err(Error::dim(format!("column {bad} out of {}", ta.cols())));
        }
        let mut data = Vec::with_capacity(idx.len() * ta.rows());
        for i in 0..ta.rows() {
            let row = ta.row_slice(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        let out = Tensor::from_parts(ta.rows(), idx.len(), data);
        self.push(out, Op::SelectCols(a, idx.to_vec()), &[a], "select_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if len == 0 || start + len > ta.cols() {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {}",
                start + len,
                ta.cols()
            )));
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for i in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(i)[start..start + len]);
        }
        let out = Tensor::from_parts(ta.rows(), len, data);
        self.push(out, Op::SliceCols(a, start), &[a], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols row mismatch"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::from_parts(rows, cols, data);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Softmax along `axis` (0 = down each column, 1 = across each row),
    /// stabilized by subtracting the max.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let out = match axis {
            1 => softmax_rows(ta, None),
            0 => softmax_rows(&ta.transpose(), None).transpose(),
            _ => return Err(Error::dim(format!("softmax axis {axis} on a matrix"))),
        };
        self.push(out, Op::Softmax(a, axis), &[a], "softmax")
    }

    /// Row softmax where row `i` only sees columns `0..=i + offset`; masked
    /// entries come out as exact zeros.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let out = softmax_rows(self.value(a), Some(offset));
        // Masked entries have zero probability, so the plain row-softmax
        // backward rule is exact for them.
        self.push(out, Op::Softmax(a, 1), &[a], "causal_softmax")
    }

    /// `x * w / sqrt(mean(x²) + eps)` per row, with `w: [1×d]`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (r, c) = (tx.rows(), tx.cols());
        if tw.rows() != 1 || tw.cols() != c {
            return Err(Error::dim(format!("rms_norm {:?} with weight {:?}", tx.shape(), tw.shape())));
        }
        let mut inv = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row_slice(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let ri = 1.0 / (ms + eps).sqrt();
            inv.push(ri);
            data.extend(row.iter().zip(tw.data()).map(|(v, g)| v * ri * g));
        }
        let out = Tensor::from_parts(r, c, data);
        self.push(out, Op::RmsNorm(x, w, inv), &[x, w], "rms_norm")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(ta.rows(), ta.cols(), data);
        self.push(out, op, &[a], name)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a), "silu")
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a), "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    /// Rotary position embedding over `n_heads` contiguous column blocks.
    /// Row `i` sits at absolute position `pos0 + i`.
    pub fn rope(&mut self, a: Var, spec: RopeSpec) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if spec.n_heads == 0 || c % spec.n_heads != 0 || (c / spec.n_heads) % 2 != 0 {
            return Err(Error::dim(format!(
                "rope needs even head dim, got width {c} over {} heads",
                spec.n_heads
            )));
        }
        let mut out = ta.data().to_vec();
        rope_apply(&mut out, r, c, spec, false);
        self.push(Tensor::from_parts(r, c, out), Op::Rope(a, spec), &[a], "rope")
    }

    /// Elementwise rational function `P(x) / Q(x)` with numerator
    /// coefficients `a: [1×(m+1)]` (constant term first) and denominator
    /// coefficients `b: [1×n]` for powers `1..=n`.
    pub fn rational(&mut self, x: Var, a: Var, b: Var, form: DenominatorForm) -> Result<Var> {
        let (tx, ta, tb) = (self.value(x), self.value(a), self.value(b));
        if ta.rows() != 1 || tb.rows() != 1 {
            return Err(Error::dim("rational coefficients must be row vectors"));
        }
        let (ca, cb) = (ta.data(), tb.data());
        let data = tx
            .data()
            .iter()
            .map(|&v| {
                let r = rational_parts(v, ca, cb, form);
                r.num / r.den
            })
            .collect();
        let out = Tensor::from_parts(tx.rows(), tx.cols(), data);
        self.push(out, Op::Rational(x, a, b, form), &[x, a, b], "rational")
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`, over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r {
            return Err(Error::dim(format!("{} targets for {r} logit rows", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("cross entropy over an all-masked batch"));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::input(format!("target {bad} outside vocabulary of {c}")));
        }
        let probs = softmax_rows(tl, None);
        let mut nll = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = tl.row_slice(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                nll += lse - row[t];
            }
        }
        let out = Tensor::scalar(nll / count as f64);
        self.push(out, Op::CrossEntropy(logits, targets.to_vec(), probs), &[logits], "cross_entropy")
    }

    /// Reverse sweep from a scalar node. Returns gradients for every
    /// trainable parameter reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Some(pid) = node.param {
                out.entries.push((pid, g));
                continue;
            }
            self.backprop(idx, &g, &mut grads);
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.value(Var(idx));
        let (r, c) = (out.rows(), out.cols());
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; r * k];
                    gemm_nt(g.data(), tb.data(), &mut da, r, c, k);
                    self.acc(grads, *a, Tensor::from_parts(r, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * c];
                    gemm_tn(ta.data(), g.data(), &mut db, r, k, c);
                    self.acc(grads, *b, Tensor::from_parts(k, c, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; r * k];
                    gemm_nn(g.data(), tb.data(), &mut da, r, c, k);
                    self.acc(grads, *a, Tensor::from_parts(r, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; c * k];
                    gemm_tn(g.data(), ta.data(), &mut db, r, c, k);
                    self.acc(grads, *b, Tensor::from_parts(c, k, db));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, g.clone());
                if self.wants(*row) {
                    let mut dr = vec![0.0; c];
                    for i in 0..r {
                        for (d, v) in dr.iter_mut().zip(g.row_slice(i)) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *row, Tensor::row(dr));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_parts(r, c, d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_parts(r, c, d));
                }
            }
            Op::Scale(a, k) => {
                let d = g.data().iter().map(|x| x * k).collect();
                self.acc(grads, *a, Tensor::from_parts(r, c, d));
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*a) {
                    let d = g.data().iter().map(|x| x * sv).collect();
                    self.acc(grads, *a, Tensor::from_parts(r, c, d));
                }
                if self.wants(*s) {
                    let ta = self.value(*a);
                    let ds = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                    self.acc(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Recip(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| -gv * y * y)
                    .collect();
                self.acc(grads, *a, Tensor::from_parts(r, c, d));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let gv = g.data()[0];
                self.acc(grads, *a, Tensor::full(ta.rows(), ta.cols(), gv));
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows();
                let mut d = Vec::with_capacity(n * c);
                for _ in 0..n {
                    d.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.acc(grads, *a, Tensor::from_parts(n, c, d));
            }
            Op::MaxRows(a, arg) => {
                let n = self.value(*a).rows();
                let mut d = Tensor::zeros(n, c);
                for (j, &i) in arg.iter().enumerate() {
                    d.data_mut()[i * c + j] = g.data()[j];
                }
                self.acc(grads, *a, d);
            }
            Op::SelectRows(a, idx_rows) => {
                let n = self.value(*a).rows();
                let mut d = Tensor::zeros(n, c);
                for (k, &i) in idx_rows.iter().enumerate() {
                    for (dst, v) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(k)) {
                        *dst += v;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SelectCols(a, idx_cols) => {
                let n = self.value(*a).cols();
                let mut d = Tensor::zeros(r, n);
                for i in 0..r {
                    for (k, &j) in idx_cols.iter().enumerate() {
                        d.data_mut()[i * n + j] += g.data()[i * c + k];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).cols();
                let mut d = Tensor::zeros(r, n);
                for i in 0..r {
                    d.data_mut()[i * n + start..i * n + start + c].copy_from_slice(g.row_slice(i));
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g.row_slice(i)[off..off + w]);
                        }
                        self.acc(grads, p, Tensor::from_parts(r, w, d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        let d = g.data()[off * c..(off + h) * c].to_vec();
                        self.acc(grads, p, Tensor::from_parts(h, c, d));
                    }
                    off += h;
                }
            }
            Op::Softmax(a, axis) => {
                let d = if *axis == 1 {
                    softmax_backward_rows(out, g)
                } else {
                    softmax_backward_rows(&out.transpose(), &g.transpose()).transpose()
                };
                self.acc(grads, *a, d);
            }
            Op::RmsNorm(x, w, inv) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                if self.wants(*x) {
                    let mut d = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let (xr, gr, ri) = (tx.row_slice(i), g.row_slice(i), inv[i]);
                        let dot: f64 = (0..c).map(|j| gr[j] * tw.data()[j] * xr[j]).sum();
                        let k = ri * ri * ri * dot / c as f64;
                        d.extend((0..c).map(|j| ri * tw.data()[j] * gr[j] - k * xr[j]));
                    }
                    self.acc(grads, *x, Tensor::from_parts(r, c, d));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; c];
                    for i in 0..r {
                        let (xr, gr) = (tx.row_slice(i), g.row_slice(i));
                        for j in 0..c {
                            dw[j] += gr[j] * xr[j] * inv[i];
                        }
                    }
                    self.acc(grads, *w, Tensor::row(dw));
                }
            }
            Op::Silu(a) => self.unary_back(grads, *a, g, |x| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }),
            Op::Gelu(a) => self.unary_back(grads, *a, g, gelu_grad),
            Op::Relu(a) => self.unary_back(grads, *a, g, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Rope(a, spec) => {
                let mut d = g.data().to_vec();
                rope_apply(&mut d, r, c, *spec, true);
                self.acc(grads, *a, Tensor::from_parts(r, c, d));
            }
            Op::Rational(x, a, b, form) => {
                let (tx, ta, tb) = (self.value(*x), self.value(*a), self.value(*b));
                let (ca, cb) = (ta.data(), tb.data());
                let mut dx = Vec::with_capacity(r * c);
                let mut da = vec![0.0; ca.len()];
                let mut db = vec![0.0; cb.len()];
                for (&v, &gv) in tx.data().iter().zip(g.data()) {
                    let p = rational_parts(v, ca, cb, *form);
                    let q2 = p.den * p.den;
                    dx.push(gv * (p.dnum / p.den - p.num * p.dden / q2));
                    let mut pw = 1.0;
                    for dj in da.iter_mut() {
                        *dj += gv * pw / p.den;
                        pw *= v;
                    }
                    let mut pw = v;
                    for (i, di) in db.iter_mut().enumerate() {
                        let sgn = match form {
                            DenominatorForm::AbsOfSum => signum0(p.den_poly),
                            DenominatorForm::SumOfAbs => signum0(cb[i] * pw),
                        };
                        *di += -gv * p.num / q2 * sgn * pw;
                        pw *= v;
                    }
                }
                self.acc(grads, *x, Tensor::from_parts(r, c, dx));
                self.acc(grads, *a, Tensor::row(da));
                self.acc(grads, *b, Tensor::row(db));
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let count = targets.iter().flatten().count() as f64;
                let gv = g.data()[0] / count;
                let v = probs.cols();
                let mut d = Tensor::zeros(probs.rows(), v);
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let row = &mut d.data_mut()[i * v..(i + 1) * v];
                        for (dst, p) in row.iter_mut().zip(probs.row_slice(i)) {
                            *dst = gv * p;
                        }
                        row[t] -= gv;
                    }
                }
                self.acc(grads, *logits, d);
            }
        }
    }

    fn unary_back(&self, grads: &mut [Option<Tensor>], a: Var, g: &Tensor, df: impl Fn(f64) -> f64) {
        let ta = self.value(a);
        let d = ta.data().iter().zip(g.data()).map(|(&x, gv)| gv * df(x)).collect();
        self.acc(grads, a, Tensor::from_parts(ta.rows(), ta.cols(), d));
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) struct RationalParts {
    pub num: f64,
    pub dnum: f64,
    pub den: f64,
    pub dden: f64,
    pub den_poly: f64,
}

/// Numerator, denominator and their x-derivatives at one point.
pub(crate) fn rational_parts(x: f64, a: &[f64], b: &[f64], form: DenominatorForm) -> RationalParts {
    // Horner for P and P'.
    let mut num = 0.0;
    let mut dnum = 0.0;
    for &aj in a.iter().rev() {
        dnum = dnum * x + num;
        num = num * x + aj;
    }
    let (den, dden, den_poly) = match form {
        DenominatorForm::AbsOfSum => {
            // S(x) = x·(b_1 + b_2 x + ...), Horner on the bracket.
            let mut s = 0.0;
            let mut ds = 0.0;
            for &bi in b.iter().rev() {
                ds = ds * x + s;
                s = s * x + bi;
            }
            let poly = s * x;
            let dpoly = ds * x + s;
            (1.0 + poly.abs(), signum0(poly) * dpoly, poly)
        }
        DenominatorForm::SumOfAbs => {
            let mut den = 1.0;
            let mut dden = 0.0;
            // pw = x^i while visiting the coefficient of x^{i+1}
            let mut pw = 1.0;
            for (i, &bi) in b.iter().enumerate() {
                let term = bi * pw * x;
                den += term.abs();
                dden += signum0(term) * (i as f64 + 1.0) * bi * pw;
                pw *= x;
            }
            (den, dden, 0.0)
        }
    };
    RationalParts {
        num,
        dnum,
        den,
        dden,
        den_poly,
    }
}

fn softmax_rows(t: &Tensor, causal: Option<usize>) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let width = causal.map_or(c, |off| (i + off + 1).min(c));
        let row = &t.row_slice(i)[..width];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..i * c + width];
        let mut sum = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - mx).exp();
            sum += *d;
        }
        dst.iter_mut().for_each(|d| *d /= sum);
    }
    Tensor::from_parts(r, c, out)
}

fn softmax_backward_rows(y: &Tensor, g: &Tensor) -> Tensor {
    let (r, c) = (y.rows(), y.cols());
    let mut d = Vec::with_capacity(r * c);
    for i in 0..r {
        let (yr, gr) = (y.row_slice(i), g.row_slice(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
    }
    Tensor::from_parts(r, c, d)
}

fn rope_apply(data: &mut [f64], rows: usize, cols: usize, spec: RopeSpec, inverse: bool) {
    let dh = cols / spec.n_heads;
    let half = dh / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for i in 0..rows {
        let pos = (spec.pos0 + i) as f64;
        for p in 0..half {
            let theta = pos * spec.base.powf(-2.0 * p as f64 / dh as f64);
            let (s, c) = theta.sin_cos();
            let s = sign * s;
            for h in 0..spec.n_heads {
                let j = i * cols + h * dh + 2 * p;
                let (x0, x1) = (data[j], data[j + 1]);
                data[j] = x0 * c - x1 * s;
                data[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}
