//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order because a node can only reference
//! nodes created before it. The tape is rebuilt for every step.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

/// tanh-approximation constant of GeLU: sqrt(2 / pi).
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_8;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation families, used to name ops in diagnostics and to select a
/// backward rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Gelu,
    Relu,
    Softmax,
    LayerNorm,
    Transpose,
    Concat,
    Slice,
    Gather,
    Reduce,
    Reshape,
    L2Loss,
    CrossEntropy,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    L2(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf | Op::Param(_) => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Transpose(_) => OpKind::Transpose,
            Op::ConcatRows(_) | Op::ConcatCols(_) => OpKind::Concat,
            Op::SliceRows(..) | Op::SliceCols(..) => OpKind::Slice,
            Op::GatherRows(..) => OpKind::Gather,
            Op::MeanRows(_) | Op::Sum(_) => OpKind::Reduce,
            Op::Reshape(_) => OpKind::Reshape,
            Op::L2(..) => OpKind::L2Loss,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

// C[m x n] += A[m x k] * B[k x n]
fn mm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// dA[m x k] += dC[m x n] * B^T
fn mm_nt_acc<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in drow.iter().zip(brow) {
                s += x * y;
            }
            da[i * k + p] += s;
        }
    }
}

// dB[k x n] += A^T * dC
fn mm_tn_acc<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &mut db[p * n..(p + 1) * n];
            for (bv, &d) in brow.iter_mut().zip(drow) {
                *bv += av * d;
            }
        }
    }
}

fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let mx = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

/// Elementwise tanh-approximated GeLU on a scalar.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    gelu_parts(x).0
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            fault: None,
        }
    }

    /// Corrupts the backward rule of one op family (gradients scaled by 1.5).
    /// Exists so that gradient checkers can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Records a leaf. If `tensor.requires_grad` is set, its gradient is
    /// available through [`Tape::grad`] after backward.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf)
    }

    /// Records a stored parameter; repeated calls return the same node so
    /// that all uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let src = store.get(id);
        let mut t = Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("stored tensor is valid");
        let op = if src.requires_grad {
            t.requires_grad = true;
            Op::Param(id)
        } else {
            Op::Leaf
        };
        let v = self.push(t, op);
        self.params.insert(id, v);
        v
    }

    /// Gradient of a `requires_grad` leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x[r x c] + row[1 x c]`, broadcasting the row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        let (rr, rc) = self.rc(row);
        if rr != 1 || rc != c {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let xv = self.value(x).data();
        let bv = self.value(row).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(xv[i * c..(i + 1) * c].iter().zip(bv).map(|(&p, &q)| p + q));
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        self.push(t, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    /// Max-stabilized softmax along `axis` (0 or the last axis of a matrix).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis + 1 == rank || (rank == 1 && axis == 0) {
            return Ok(self.softmax_rows(x));
        }
        if rank == 2 && axis == 0 {
            let t = self.transpose(x);
            let s = self.softmax_rows(t);
            return Ok(self.transpose(s));
        }
        Err(Error::Invalid(format!("softmax axis {axis} for rank {rank}")))
    }

    fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let src = self.value(x);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(&src.data()[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Softmax(x))
    }

    /// Layer normalization over the last axis followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.rc(x);
        for p in [gain, bias] {
            let (pr, pc) = self.rc(p);
            if pr != 1 || pc != c {
                return Err(shape_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::lit(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, data).expect("valid");
        self.push(t, Op::Transpose(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let c = self.rc(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.rc(p);
            if pc != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += pr;
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let r = self.rc(first).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.rc(p);
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += pc;
        }
        let mut data = vec![T::zero(); r * cols];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.rc(p);
            let src = self.value(p).data();
            for i in 0..r {
                data[i * cols + off..i * cols + off + pc].copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let t = Tensor::matrix(r, cols, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if len == 0 || start + len > r {
            return Err(Error::Invalid(format!("row slice {start}..{} of {r} rows", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(t, Op::SliceRows(x, start)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.rc(x);
        if len == 0 || start + len > c {
            return Err(Error::Invalid(format!("column slice {start}..{} of {c} columns", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::matrix(r, len, data)?;
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    /// Selects rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, _) = self.rc(x);
        if idx.is_empty() {
            return Err(Error::Invalid("gather of no rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Invalid(format!("row index {bad} out of {r}")));
        }
        let t = self.value(x).gather_rows(idx);
        Ok(self.push(t, Op::GatherRows(x, idx.to_vec())))
    }

    /// Column means: `[r x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        let inv = T::one() / T::lit(r as f64);
        data.iter_mut().for_each(|v| *v *= inv);
        let t = Tensor::matrix(1, c, data).expect("valid");
        self.push(t, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Mean squared difference over all elements.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(shape_err("l2_loss", p.shape(), t.shape()));
        }
        let n = T::lit(p.numel() as f64);
        let s = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(s), Op::L2(pred, target)))
    }

    /// Mean negative log-softmax probability of the labelled class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.rc(logits);
        if labels.len() != b {
            return Err(shape_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &src[i * k..(i + 1) * k];
            softmax_row(row, &mut probs[i * k..(i + 1) * k]);
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss += lse - row[labels[i]];
        }
        loss /= T::lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar. Gradients of stored trainable parameters
    /// are accumulated into `store`; gradients of `requires_grad` leaves are
    /// accumulated on the tape. Repeated calls add up.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_with(loss, |id, g| store.get_mut(id).accumulate_grad(g))
    }

    /// Reverse pass that only fills leaf gradients on the tape.
    pub fn backward_local(&mut self, loss: Var) -> Result<()> {
        self.backward_with(loss, |_, _| {})
    }

    fn backward_with(&mut self, loss: Var, mut sink: impl FnMut(ParamId, &[T])) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= T::lit(1.5));
            }
            match &node.op {
                Op::Leaf => {
                    if node.value.requires_grad {
                        match self.leaf_grads.get_mut(&idx) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => {
                                self.leaf_grads.insert(idx, g);
                            }
                        }
                    }
                }
                Op::Param(id) => {
                    sink(*id, &g);
                    match self.leaf_grads.get_mut(&idx) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                        None => {
                            self.leaf_grads.insert(idx, g);
                        }
                    }
                }
                op => {
                    let nodes = &self.nodes;
                    let val = |v: &Var| &nodes[v.0].value;
                    backward_op(op, &node.value, &g, &val, &mut grads);
                }
            }
        }
        Ok(())
    }
}

fn acc_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn backward_op<'a, T: Real>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    val: &impl Fn(&Var) -> &'a Tensor<T>,
    grads: &mut [Option<Vec<T>>],
) {
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let da = acc_into(grads, *a, m * k);
            mm_nt_acc(g, tb.data(), da, m, k, n);
            let db = acc_into(grads, *b, k * n);
            mm_tn_acc(ta.data(), g, db, m, k, n);
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                let d = acc_into(grads, *v, g.len());
                d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            let d = acc_into(grads, *a, g.len());
            d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            let d = acc_into(grads, *b, g.len());
            d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let d = acc_into(grads, *a, g.len());
            for ((x, &gv), &bv) in d.iter_mut().zip(g).zip(tb.data()) {
                *x += gv * bv;
            }
            let d = acc_into(grads, *b, g.len());
            for ((x, &gv), &av) in d.iter_mut().zip(g).zip(ta.data()) {
                *x += gv * av;
            }
        }
        Op::AddRow(x, row) => {
            let c = out.cols();
            let d = acc_into(grads, *x, g.len());
            d.iter_mut().zip(g).for_each(|(p, &q)| *p += q);
            let d = acc_into(grads, *row, c);
            for chunk in g.chunks(c) {
                d.iter_mut().zip(chunk).for_each(|(p, &q)| *p += q);
            }
        }
        Op::Scale(x, s) => {
            let d = acc_into(grads, *x, g.len());
            d.iter_mut().zip(g).for_each(|(p, &q)| *p += q * *s);
        }
        Op::Gelu(x) => {
            let xv = val(x).data();
            let d = acc_into(grads, *x, g.len());
            for ((p, &q), &xi) in d.iter_mut().zip(g).zip(xv) {
                *p += q * gelu_parts(xi).1;
            }
        }
        Op::Relu(x) => {
            let xv = val(x).data();
            let d = acc_into(grads, *x, g.len());
            for ((p, &q), &xi) in d.iter_mut().zip(g).zip(xv) {
                if xi > T::zero() {
                    *p += q;
                }
            }
        }
        Op::Softmax(x) => {
            let c = out.cols();
            let y = out.data();
            let d = acc_into(grads, *x, g.len());
            for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for ((p, &gq), &yq) in drow.iter_mut().zip(grow).zip(yrow) {
                    *p += yq * (gq - dot);
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let c = out.cols();
            let gv = val(gain).data().to_vec();
            let nf = T::lit(c as f64);
            {
                let dg = acc_into(grads, *gain, c);
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] += grow[j] * hrow[j];
                    }
                }
            }
            {
                let db = acc_into(grads, *bias, c);
                for grow in g.chunks(c) {
                    db.iter_mut().zip(grow).for_each(|(p, &q)| *p += q);
                }
            }
            let dx = acc_into(grads, *x, g.len());
            let mut dh = vec![T::zero(); c];
            for (i, (grow, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                for j in 0..c {
                    dh[j] = grow[j] * gv[j];
                }
                let mean_dh = dh.iter().copied().sum::<T>() / nf;
                let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                for j in 0..c {
                    dx[i * c + j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (out.rows(), out.cols()); // out is c_in x r_in
            let d = acc_into(grads, *x, g.len());
            // x is c x r
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] += g[i * c + j];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = val(p).numel();
                let d = acc_into(grads, *p, n);
                d.iter_mut().zip(&g[off..off + n]).for_each(|(a, &b)| *a += b);
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let cols = out.cols();
            let r = out.rows();
            let mut off = 0;
            for p in parts {
                let pc = val(p).cols();
                let d = acc_into(grads, *p, r * pc);
                for i in 0..r {
                    for j in 0..pc {
                        d[i * pc + j] += g[i * cols + off + j];
                    }
                }
                off += pc;
            }
        }
        Op::SliceRows(x, start) => {
            let c = out.cols();
            let n = val(x).numel();
            let d = acc_into(grads, *x, n);
            d[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        Op::SliceCols(x, start) => {
            let len = out.cols();
            let xc = val(x).cols();
            let n = val(x).numel();
            let d = acc_into(grads, *x, n);
            for (i, grow) in g.chunks(len).enumerate() {
                for j in 0..len {
                    d[i * xc + start + j] += grow[j];
                }
            }
        }
        Op::GatherRows(x, idx) => {
            let c = out.cols();
            let n = val(x).numel();
            let d = acc_into(grads, *x, n);
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g[k * c + j];
                }
            }
        }
        Op::MeanRows(x) => {
            let tx = val(x);
            let (r, c) = (tx.rows(), tx.cols());
            let inv = T::one() / T::lit(r as f64);
            let d = acc_into(grads, *x, r * c);
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] += g[j] * inv;
                }
            }
        }
        Op::Sum(x) => {
            let n = val(x).numel();
            let d = acc_into(grads, *x, n);
            d.iter_mut().for_each(|v| *v += g[0]);
        }
        Op::Reshape(x) => {
            let d = acc_into(grads, *x, g.len());
            d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        Op::L2(p, t) => {
            let (tp, tt) = (val(p), val(t));
            let n = tp.numel();
            let k = T::lit(2.0) * g[0] / T::lit(n as f64);
            let diff: Vec<T> = tp.data().iter().zip(tt.data()).map(|(&a, &b)| (a - b) * k).collect();
            let d = acc_into(grads, *p, n);
            d.iter_mut().zip(&diff).for_each(|(a, &b)| *a += b);
            let d = acc_into(grads, *t, n);
            d.iter_mut().zip(&diff).for_each(|(a, &b)| *a -= b);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let k = val(logits).cols();
            let b = labels.len();
            let scale = g[0] / T::lit(b as f64);
            let d = acc_into(grads, *logits, b * k);
            for (i, &l) in labels.iter().enumerate() {
                for j in 0..k {
                    let onehot = if j == l { T::one() } else { T::zero() };
                    d[i * k + j] += (probs[i * k + j] - onehot) * scale;
                }
            }
        }
    }
}
