//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! immutable once recorded, so several decoding hypotheses can share a tape.
//! Calling [`Tape::backward`] on a `1x1` node returns gradients for every
//! parameter that contributed to it.

use std::collections::HashMap;

use rand::Rng;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MaskedLogSoftmax { x: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Tensor<T>, inv_std: Vec<T> },
    NormalizeRows { x: Var, inv_norm: Vec<T> },
    SumRows(Var),
    SumAll(Var),
    ClampLog { x: Var, lo: T, hi: T },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Pick { x: Var, r: usize, c: usize },
    GatherByType { x: Var, types: Vec<usize> },
    ScatterByType { w: Var, types: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.get(0, 0)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a stored parameter. Frozen parameters become constants.
    /// Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.params.is_trainable(id);
        let v = self.push(self.params.get(id).clone(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.shape(), (1, av.cols()), "add_row expects a matching row vector");
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).scale(k);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(&[a]);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(Float::tanh);
        let ng = self.ng(&[a]);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r));
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise log-softmax restricted to `mask[c] == true` columns; masked
    /// columns get `-inf`. Every row must have at least one legal column.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.cols(), "mask width mismatch");
        assert!(mask.iter().any(|&m| m), "log-softmax over an empty legal set");
        let mut v = x.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .fold(T::neg_infinity(), |m, (&x, _)| m.max(x));
            let lse = row
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(&x, _)| (x - max).exp())
                .sum::<T>()
                .ln()
                + max;
            for (x, &m) in row.iter_mut().zip(&mask) {
                *x = if m { *x - lse } else { T::neg_infinity() };
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::MaskedLogSoftmax { x: a, mask }, ng)
    }

    /// Row-wise layer normalisation with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let n = T::of(cols as f64);
        let mut normed = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (o, &v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = Tensor::from_fn(rows, cols, |r, c| normed.get(r, c) * g.get(0, c) + b.get(0, c));
        let ng = self.ng(&[a, gain, bias]);
        self.push(out, Op::LayerNorm { x: a, gain, bias, normed, inv_std }, ng)
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` map to
    /// zero (and pass no gradient).
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut inv_norm = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let norm = dot(x.row(r), x.row(r)).sqrt();
            let inv = if norm < eps { T::zero() } else { T::one() / norm };
            inv_norm.push(inv);
            for e in v.row_mut(r) {
                *e *= inv;
            }
        }
        let ng = self.ng(&[a]);
        self.push(v, Op::NormalizeRows { x: a, inv_norm }, ng)
    }

    /// Column sums as a `1 x n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(1, x.cols(), |_, c| (0..x.rows()).map(|r| x.get(r, c)).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::full(1, 1, self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        let s = self.sum_rows(a);
        self.scale(s, T::one() / T::of(n.max(1) as f64))
    }

    /// `ln(clamp(x, lo, hi))` elementwise; gradient is zero where the clamp
    /// is active.
    pub fn clamp_log(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi).ln());
        let ng = self.ng(&[a]);
        self.push(v, Op::ClampLog { x: a, lo, hi }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let x = self.value(a);
        let v = Tensor::from_fn(index.len(), x.cols(), |r, c| x.get(index[r], c));
        let ng = self.ng(&[a]);
        self.push(v, Op::GatherRows { x: a, index }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        let ng = self.ng(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::vstack(&tensors);
        let ng = self.ng(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "column slice out of bounds");
        let v = Tensor::from_fn(x.rows(), len, |r, c| x.get(r, start + c));
        let ng = self.ng(&[a]);
        self.push(v, Op::SliceCols { x: a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(&[a]);
        self.push(v, Op::SliceRows { x: a, start }, ng)
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let v = Tensor::full(1, 1, self.value(a).get(r, c));
        let ng = self.ng(&[a]);
        self.push(v, Op::Pick { x: a, r, c }, ng)
    }

    /// `out[i][j] = x[i][types[i*n + j]]` for an `n x n` type table.
    pub fn gather_by_type(&mut self, a: Var, types: Vec<usize>) -> Var {
        let x = self.value(a);
        let n = x.rows();
        assert_eq!(types.len(), n * n, "type table must be square over rows");
        let v = Tensor::from_fn(n, n, |i, j| x.get(i, types[i * n + j]));
        let ng = self.ng(&[a]);
        self.push(v, Op::GatherByType { x: a, types }, ng)
    }

    /// `out[i][r] = Σ_j w[i][j] · [types[i*n + j] == r]`.
    pub fn scatter_by_type(&mut self, w: Var, types: Vec<usize>, num_types: usize) -> Var {
        let x = self.value(w);
        let n = x.rows();
        assert_eq!(types.len(), n * x.cols(), "type table shape mismatch");
        let mut v = Tensor::zeros(n, num_types);
        for i in 0..n {
            for j in 0..x.cols() {
                let r = types[i * x.cols() + j];
                let cur = v.get(i, r);
                v.set(i, r, cur + x.get(i, j));
            }
        }
        let ng = self.ng(&[w]);
        self.push(v, Op::ScatterByType { w, types }, ng)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (rows, cols) = self.shape(a);
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < p { T::zero() } else { keep });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Gradients of the scalar node `loss` w.r.t. every trainable parameter.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(1, 1));
        let mut out = Gradients::new(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, d: Tensor<T>| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&d),
                        slot @ None => *slot = Some(d),
                    }
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_t(self.value(*b)));
                    send(*b, self.value(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    send(*a, g.matmul(self.value(*b)));
                    send(*b, g.t_matmul(self.value(*a)));
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.value(*b), |d, y| d * y));
                    send(*b, g.zip_map(self.value(*a), |d, x| d * x));
                }
                Op::AddRow(a, b) => {
                    let cols = g.cols();
                    let db = Tensor::from_fn(1, cols, |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    send(*a, g);
                    send(*b, db);
                }
                Op::Scale(a, k) => send(*a, g.scale(*k)),
                Op::AddScalar(a) => send(*a, g),
                Op::Relu(a) => {
                    send(*a, g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() }))
                }
                Op::Tanh(_) | Op::Sigmoid(_) => {
                    let y = &node.value;
                    let (a, d) = match &node.op {
                        Op::Tanh(a) => (*a, g.zip_map(y, |d, y| d * (T::one() - y * y))),
                        Op::Sigmoid(a) => (*a, g.zip_map(y, |d, y| d * y * (T::one() - y))),
                        _ => unreachable!(),
                    };
                    send(a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for r in 0..y.rows() {
                        let s = dot(g.row(r), y.row(r));
                        for (dx, (&dy, &p)) in d.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                            *dx = p * (dy - s);
                        }
                    }
                    send(*a, d);
                }
                Op::MaskedLogSoftmax { x, mask } => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: T =
                            g.row(r).iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum();
                        for c in 0..y.cols() {
                            if mask[c] {
                                d.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                            }
                        }
                    }
                    send(*x, d);
                }
                Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let n = T::of(cols as f64);
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dgain = Tensor::zeros(1, cols);
                    let mut dbias = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let dxhat: Vec<T> = (0..cols).map(|c| g.get(r, c) * gv.get(0, c)).collect();
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = dxhat.iter().zip(normed.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            let xh = normed.get(r, c);
                            dx.set(r, c, inv_std[r] / n * (n * dxhat[c] - sum_d - xh * sum_dx));
                            dgain.set(0, c, dgain.get(0, c) + g.get(r, c) * xh);
                            dbias.set(0, c, dbias.get(0, c) + g.get(r, c));
                        }
                    }
                    send(*x, dx);
                    send(*gain, dgain);
                    send(*bias, dbias);
                }
                Op::NormalizeRows { x, inv_norm } => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if inv_norm[r] == T::zero() {
                            continue;
                        }
                        let s = dot(g.row(r), y.row(r));
                        for c in 0..y.cols() {
                            d.set(r, c, (g.get(r, c) - y.get(r, c) * s) * inv_norm[r]);
                        }
                    }
                    send(*x, d);
                }
                Op::SumRows(a) => {
                    let rows = self.value(*a).rows();
                    send(*a, Tensor::from_fn(rows, g.cols(), |_, c| g.get(0, c)));
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    send(*a, Tensor::full(r, c, g.get(0, 0)));
                }
                Op::ClampLog { x, lo, hi } => {
                    let d = g.zip_map(self.value(*x), |d, v| if v > *lo && v <= *hi { d / v } else { T::zero() });
                    send(*x, d);
                }
                Op::GatherRows { x, index } => {
                    let (r, c) = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for (k, &src) in index.iter().enumerate() {
                        for (a, &b) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                            *a += b;
                        }
                    }
                    send(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let d = Tensor::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                        offset += cols;
                        send(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        send(p, g.slice_rows(offset, rows));
                        offset += rows;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    send(*x, d);
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..g.rows() {
                        d.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    send(*x, d);
                }
                Op::Pick { x, r, c } => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Tensor::zeros(rows, cols);
                    d.set(*r, *c, g.get(0, 0));
                    send(*x, d);
                }
                Op::GatherByType { x, types } => {
                    let (n, k) = self.shape(*x);
                    let mut d = Tensor::zeros(n, k);
                    for i in 0..n {
                        for j in 0..n {
                            let t = types[i * n + j];
                            d.set(i, t, d.get(i, t) + g.get(i, j));
                        }
                    }
                    send(*x, d);
                }
                Op::ScatterByType { w, types } => {
                    let (n, m) = self.shape(*w);
                    let d = Tensor::from_fn(n, m, |i, j| g.get(i, types[i * m + j]));
                    send(*w, d);
                }
            }
        }
        out
    }
}

use num_traits::Float;

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;

    /// Central-difference check of `f` w.r.t. every entry of parameter `id`.
    fn check_param(
        store: &mut ParamStore<f64>,
        id: ParamId,
        f: &dyn Fn(&mut Tape<'_, f64>) -> Var,
    ) {
        let analytic = {
            let mut tape = Tape::new(store);
            let l = f(&mut tape);
            tape.backward(l).get(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
        };
        let h = 1e-6;
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = {
                let mut t = Tape::new(store);
                let l = f(&mut t);
                t.scalar(l)
            };
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = {
                let mut t = Tape::new(store);
                let l = f(&mut t);
                t.scalar(l)
            };
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / (1e-8 + a.abs().max(numeric.abs()));
            assert!(err < 1e-5 || (a - numeric).abs() < 1e-8, "entry {k}: analytic {a} numeric {numeric}");
        }
    }

    fn store_with(shapes: &[(&str, usize, usize)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut rng = seeded_rng(3);
        let mut s = ParamStore::new();
        let ids = shapes.iter().map(|&(n, r, c)| s.add(n, Tensor::randn(r, c, 1.0, &mut rng))).collect();
        (s, ids)
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let (mut s, ids) = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 3, 2)]);
        let (a, b, c) = (ids[0], ids[1], ids[2]);
        let f = move |t: &mut Tape<'_, f64>| {
            let (va, vb, vc) = (t.param(a), t.param(b), t.param(c));
            let ab = t.matmul(va, vb);
            let x = t.mul(ab, vc);
            let y = t.tanh(x);
            let z = t.sigmoid(ab);
            let w = t.sub(y, z);
            let bt = t.transpose(vb);
            let u = t.matmul_t(va, bt);
            let s1 = t.sum_all(u);
            let s2 = t.sum_all(w);
            t.add(s1, s2)
        };
        for id in ids {
            check_param(&mut s, id, &f);
        }
    }

    #[test]
    fn normalisation_gradients() {
        let (mut s, ids) = store_with(&[("x", 3, 5), ("g", 1, 5), ("b", 1, 5), ("w", 5, 5)]);
        let (x, g, b, w) = (ids[0], ids[1], ids[2], ids[3]);
        let f = move |t: &mut Tape<'_, f64>| {
            let (vx, vg, vb, vw) = (t.param(x), t.param(g), t.param(b), t.param(w));
            let ln = t.layer_norm(vx, vg, vb, 1e-5);
            let p = t.matmul(ln, vw);
            let sm = t.softmax_rows(p);
            let nr = t.normalize_rows(p, 1e-12);
            let lsm = t.masked_log_softmax(p, vec![true, false, true, true, false]);
            let picked = t.pick(lsm, 1, 2);
            let m = t.mul(sm, nr);
            let total = t.sum_all(m);
            t.add(total, picked)
        };
        for id in ids {
            check_param(&mut s, id, &f);
        }
    }

    #[test]
    fn structural_gradients() {
        let (mut s, ids) = store_with(&[("x", 4, 3), ("r", 3, 2)]);
        let (x, rel) = (ids[0], ids[1]);
        let types2: Vec<usize> = vec![0, 1, 1, 0, 1, 1, 0, 0, 0, 0, 1, 0, 1, 0, 1, 1];
        let f2 = move |t: &mut Tape<'_, f64>| {
            let (vx, vr) = (t.param(x), t.param(rel));
            let p = t.matmul(vx, vr);
            let g = t.gather_by_type(p, types2.clone());
            let gg = t.mul(g, g);
            t.sum_all(gg)
        };
        for &id in &ids {
            check_param(&mut s, id, &f2);
        }
        let f3 = move |t: &mut Tape<'_, f64>| {
            let vx = t.param(x);
            let pt = t.matmul_t(vx, vx);
            let w = t.mul(pt, pt);
            let sc = t.scatter_by_type(w, vec![0, 1, 2, 0, 1, 1, 0, 2, 2, 2, 1, 0, 0, 0, 1, 2], 3);
            let sq = t.mul(sc, sc);
            let a = t.slice_cols(vx, 1, 2);
            let b = t.gather_rows(vx, vec![3, 0, 3]);
            let bb = t.slice_rows(b, 1, 2);
            let bb = t.slice_cols(bb, 0, 2);
            let cr = t.concat_rows(&[bb, a]);
            let cc = t.concat_cols(&[cr, cr]);
            let cs = t.sum_rows(cc);
            let cs2 = t.mul(cs, cs);
            let l1 = t.sum_all(sq);
            let l2 = t.sum_all(cs2);
            t.add(l1, l2)
        };
        check_param(&mut s, x, &f3);
    }

    #[test]
    fn clamp_log_zero_gradient_outside_range() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::from_rows(&[vec![0.5, 2.0, 1e-9]]));
        let mut t = Tape::new(&s);
        let v = t.param(id);
        let l = t.clamp_log(v, 1e-6, 1.0);
        let total = t.sum_all(l);
        let g = t.backward(total);
        let g = g.get(id).unwrap();
        assert!((g.get(0, 0) - 2.0).abs() < 1e-12);
        assert_eq!(g.get(0, 1), 0.0);
        assert_eq!(g.get(0, 2), 0.0);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("enc.w", Tensor::ones(2, 2));
        let b = s.add("dec.w", Tensor::ones(2, 2));
        s.set_trainable_prefix("enc.", false);
        let mut t = Tape::new(&s);
        let (va, vb) = (t.param(a), t.param(b));
        let p = t.matmul(va, vb);
        let l = t.sum_all(p);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}
