//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! Each recorded node owns its forward value. [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid topological order
//! because an op can only reference nodes recorded before it.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::shape_err;
use crate::{Adjacency, NnError, ParamId, ParamStore, Result, Scalar};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct AttentionNode<T> {
    q: Var,
    k: Var,
    v: Var,
    q_len: usize,
    kv_len: usize,
    heads: usize,
    /// Softmax weights laid out as `[seq][head][q_pos][kv_pos]`.
    probs: Vec<T>,
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    MeanAgg(Var, Arc<Adjacency>),
    ConcatCols(Var, Var),
    Interleave(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Attention(AttentionNode<T>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Array2<T>,
    },
    Sum(Var),
    Dot(Var, Array2<T>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Records one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T>(a: &Array2<T>) -> String {
    format!("{}x{}", a.nrows(), a.ncols())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; gradients with respect to it are still reported by
    /// [`Gradients::get`].
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Loads a parameter. Repeated loads of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err(
                "matmul",
                format!("{}xK, Kx?", va.nrows()),
                format!("{} * {}", dims(va), dims(vb)),
            ));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(shape_err("add_bias", format!("1x{}", vx.ncols()), dims(vb)));
        }
        let out = vx + vb;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("add", dims(va), dims(vb)));
        }
        let out = va + vb;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    /// Mean over graph neighbors, row by row.
    pub fn mean_agg(&mut self, x: Var, adj: &Arc<Adjacency>) -> Result<Var> {
        let out = adj.mean_aggregate(self.value(x).view())?;
        Ok(self.push(out, Op::MeanAgg(x, Arc::clone(adj))))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.nrows() != vb.nrows() {
            return Err(shape_err(
                "concat_cols",
                format!("{} rows", va.nrows()),
                dims(vb),
            ));
        }
        let out =
            ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Interleaves `k` equally shaped `S x d` matrices into token sequences:
    /// row `s * k + j` of the output is row `s` of input `j`.
    pub fn interleave(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(
            *parts
                .first()
                .ok_or_else(|| shape_err("interleave", "at least one part", "none"))?,
        );
        let (rows, cols) = first.dim();
        let k = parts.len();
        let mut out = Array2::zeros((rows * k, cols));
        for (j, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            if v.dim() != (rows, cols) {
                return Err(shape_err("interleave", format!("{rows}x{cols}"), dims(v)));
            }
            out.slice_mut(s![j..;k, ..]).assign(v);
        }
        Ok(self.push(out, Op::Interleave(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.nrows()) {
            return Err(shape_err(
                "gather_rows",
                format!("row < {}", vx.nrows()),
                format!("row {bad}"),
            ));
        }
        let out = vx.select(Axis(0), rows);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec())))
    }

    /// Scaled dot-product attention over `S` independent sequences.
    ///
    /// `q` holds `S * q_len` rows and `k`, `v` hold `S * kv_len` rows, each
    /// sequence contiguous. Width `d` is split into `heads` slices of
    /// `d / heads` columns; scores are scaled by `1 / sqrt(d / heads)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_len: usize,
        kv_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.ncols();
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Heads { heads, width: d });
        }
        if q_len == 0 || kv_len == 0 || vq.nrows() % q_len != 0 {
            return Err(shape_err(
                "attention",
                format!("rows divisible by q_len={q_len}"),
                dims(vq),
            ));
        }
        let seqs = vq.nrows() / q_len;
        let kv_dim = (seqs * kv_len, d);
        if vk.dim() != kv_dim || vv.dim() != kv_dim {
            return Err(shape_err(
                "attention",
                format!("{}x{}", kv_dim.0, kv_dim.1),
                format!("{} / {}", dims(vk), dims(vv)),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let qs = vq.as_standard_layout();
        let ks = vk.as_standard_layout();
        let vs = vv.as_standard_layout();
        let (qs, ks, vs) = (
            qs.as_slice().unwrap(),
            ks.as_slice().unwrap(),
            vs.as_slice().unwrap(),
        );
        let mut out = vec![T::zero(); seqs * q_len * d];
        let mut probs = vec![T::zero(); seqs * heads * q_len * kv_len];
        let mut scores = vec![T::zero(); kv_len];
        for sq in 0..seqs {
            for h in 0..heads {
                let c0 = h * dh;
                for a in 0..q_len {
                    let qrow = &qs[(sq * q_len + a) * d + c0..][..dh];
                    for (b, sc) in scores.iter_mut().enumerate() {
                        let krow = &ks[(sq * kv_len + b) * d + c0..][..dh];
                        *sc = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(&mut scores);
                    let pbase = ((sq * heads + h) * q_len + a) * kv_len;
                    probs[pbase..pbase + kv_len].copy_from_slice(&scores);
                    let orow = &mut out[(sq * q_len + a) * d + c0..][..dh];
                    for (b, &p) in scores.iter().enumerate() {
                        let vrow = &vs[(sq * kv_len + b) * d + c0..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((seqs * q_len, d), out).expect("sized above");
        Ok(self.push(
            out,
            Op::Attention(AttentionNode {
                q,
                k,
                v,
                q_len,
                kv_len,
                heads,
                probs,
            }),
        ))
    }

    /// Row-wise layer normalization with a learned `1 x d` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.ncols();
        if vg.dim() != (1, d) || vb.dim() != (1, d) {
            return Err(shape_err(
                "layer_norm",
                format!("1x{d}"),
                format!("{} / {}", dims(vg), dims(vb)),
            ));
        }
        let n = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut xhat = Array2::zeros(vx.raw_dim());
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for (row, mut xr) in vx.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / n;
            let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xr.zip_mut_with(&row, |o, &v| *o = (v - mean) * is);
        }
        let out = &xhat * vg + vb;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax weights of an attention node, laid out as
    /// `[seq][head][q_pos][kv_pos]`.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention(a) => Some(&a.probs),
            _ => None,
        }
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: Array2<T>) -> Result<Var> {
        let vp = self.value(pred);
        if vp.dim() != target.dim() {
            return Err(shape_err("mse", dims(vp), dims(&target)));
        }
        let n = T::from_f64(vp.len().max(1) as f64);
        let loss = vp
            .iter()
            .zip(&target)
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t))
            / n;
        Ok(self.push(Array2::from_elem((1, 1), loss), Op::Mse { pred, target }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(x))
    }

    /// `sum(x * weights)`, a scalar probe used by gradient checks.
    pub fn dot_with(&mut self, x: Var, weights: Array2<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != weights.dim() {
            return Err(shape_err("dot_with", dims(vx), dims(&weights)));
        }
        let s = (vx * &weights).sum();
        Ok(self.push(Array2::from_elem((1, 1), s), Op::Dot(x, weights)))
    }

    /// Propagates d(loss)/d(node) through the tape and adds the parameter
    /// gradients into `store`. Gradients accumulate across calls until
    /// [`ParamStore::zero_grad`].
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::NoForward);
        }
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(NnError::NonScalarLoss {
                rows: lv.nrows(),
                cols: lv.ncols(),
            });
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad += &g;
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&node.value, |d, &y| {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAgg(x, adj) => {
                    accumulate(&mut grads, *x, adj.mean_aggregate_adjoint(g.view()));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    accumulate(&mut grads, *a, g.slice(s![.., ..ca]).to_owned());
                    accumulate(&mut grads, *b, g.slice(s![.., ca..]).to_owned());
                }
                Op::Interleave(parts) => {
                    let k = parts.len();
                    for (j, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, g.slice(s![j..;k, ..]).to_owned());
                    }
                }
                Op::GatherRows(x, rows) => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(src);
                        row += &g.row(r);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention(att) => self.attention_backward(att, g.view(), &mut grads),
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * vg;
                    let n = T::from_f64(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (r, mut dr) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.iter().zip(xh).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        let k = inv_std[r] / n;
                        for ((o, &p), &q) in dr.iter_mut().zip(dh).zip(xh) {
                            *o = k * (n * p - sum_d - q * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mse { pred, target } => {
                    let vp = self.value(*pred);
                    let scale = g[[0, 0]] * T::from_f64(2.0 / vp.len().max(1) as f64);
                    let dp = (vp - target).mapv(|d| d * scale);
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Sum(x) => {
                    let dx = Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dot(x, w) => {
                    let gs = g[[0, 0]];
                    accumulate(&mut grads, *x, w.mapv(|v| v * gs));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn attention_backward(
        &self,
        att: &AttentionNode<T>,
        g: ArrayView2<T>,
        grads: &mut [Option<Array2<T>>],
    ) {
        let AttentionNode {
            q,
            k,
            v,
            q_len,
            kv_len,
            heads,
            probs,
        } = att;
        let (q_len, kv_len, heads) = (*q_len, *kv_len, *heads);
        let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
        let d = vq.ncols();
        let dh = d / heads;
        let seqs = vq.nrows() / q_len;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let qs = vq.as_standard_layout();
        let ks = vk.as_standard_layout();
        let vs = vv.as_standard_layout();
        let gs = g.as_standard_layout();
        let (qs, ks, vs, gs) = (
            qs.as_slice().unwrap(),
            ks.as_slice().unwrap(),
            vs.as_slice().unwrap(),
            gs.as_slice().unwrap(),
        );
        let mut dq = vec![T::zero(); qs.len()];
        let mut dk = vec![T::zero(); ks.len()];
        let mut dv = vec![T::zero(); vs.len()];
        let mut dp = vec![T::zero(); kv_len];
        for sq in 0..seqs {
            for h in 0..heads {
                let c0 = h * dh;
                for a in 0..q_len {
                    let qoff = (sq * q_len + a) * d + c0;
                    let grow = &gs[qoff..][..dh];
                    let pbase = ((sq * heads + h) * q_len + a) * kv_len;
                    let p = &probs[pbase..pbase + kv_len];
                    for b in 0..kv_len {
                        let koff = (sq * kv_len + b) * d + c0;
                        dp[b] = dot(grow, &vs[koff..][..dh]);
                        for (o, &x) in dv[koff..][..dh].iter_mut().zip(grow) {
                            *o = *o + p[b] * x;
                        }
                    }
                    let centre = p
                        .iter()
                        .zip(&dp)
                        .fold(T::zero(), |acc, (&pi, &di)| acc + pi * di);
                    for b in 0..kv_len {
                        let ds = p[b] * (dp[b] - centre) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let koff = (sq * kv_len + b) * d + c0;
                        for c in 0..dh {
                            dq[qoff + c] = dq[qoff + c] + ds * ks[koff + c];
                            dk[koff + c] = dk[koff + c] + ds * qs[qoff + c];
                        }
                    }
                }
            }
        }
        accumulate(grads, *q, Array2::from_shape_vec(vq.raw_dim(), dq).unwrap());
        accumulate(grads, *k, Array2::from_shape_vec(vk.raw_dim(), dk).unwrap());
        accumulate(grads, *v, Array2::from_shape_vec(vv.raw_dim(), dv).unwrap());
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Per-node gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
