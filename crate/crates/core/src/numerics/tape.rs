//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Nodes are recorded in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Operations whose inputs carry
//! no gradient are recorded as constants and keep no saved buffers.

use std::cell::{Ref, RefCell};

use super::interp::ResizePlan;
use super::kernels::{self, CE_LOG_EPS};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: T },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        stats: kernels::LayerNormStats<T>,
    },
    GatherRows { a: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    ReplaceRows { a: Var, row: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
    Transpose { a: Var, m: usize, n: usize },
    Reshape(Var),
    Softmax { a: Var, axis: usize, temperature: T },
    CrossEntropy { target: Var, pred: Var, rows: usize },
    L2Normalize { a: Var, norms: Vec<T> },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Resize { a: Var, plan: ResizePlan<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording context for differentiable computations.
///
/// Gradients of leaves created with [`param`](Self::param) are filled by
/// [`backward`](Self::backward). Repeated backward calls accumulate into the
/// same buffers until [`zero_grad`](Self::zero_grad).
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(shape, g.clone()).expect("gradient matches value shape"))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        let out = kernels::matmul(av, bv)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        drop(nodes);
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::sub(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(&self.value(a), &self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Broadcast add of a `[d]` vector to every row.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = kernels::add_row(&self.value(a), &self.value(row))?;
        Ok(self.push(out, Op::AddRow { a, row }, &[a, row]))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let out = kernels::scale(&self.value(a), c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn gelu(&self, a: Var) -> Var {
        let out = kernels::gelu(&self.value(a));
        self.push(out, Op::Gelu(a), &[a])
    }

    /// `x·W + b` for `x [n×in]`, `W [in×out]`, `b [out]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
        let (_, cols) = xv.as_matrix_dims();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (out, stats) = kernels::layer_norm_raw(xv.data(), gv.data(), bv.data(), cols);
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        drop(nodes);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let out = kernels::gather_rows(&self.value(a), index)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            &[a],
        ))
    }

    /// Stacks matrices with equal column counts along the first axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let (_, cols) = nodes[first.0].value.as_matrix_dims();
        let mut data = Vec::new();
        for p in parts {
            let v = &nodes[p.0].value;
            if v.as_matrix_dims().1 != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: nodes[first.0].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        drop(nodes);
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows flagged in `mask` are replaced by `row`.
    pub fn replace_rows(&self, a: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (av, rv) = (&nodes[a.0].value, &nodes[row.0].value);
        let (rows, cols) = av.as_matrix_dims();
        if rv.numel() != cols || mask.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "replace_rows",
                lhs: av.shape().to_vec(),
                rhs: vec![mask.len(), rv.numel()],
            });
        }
        let mut data = av.data().to_vec();
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            data[r * cols..(r + 1) * cols].copy_from_slice(rv.data());
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        drop(nodes);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                a,
                row,
                mask: mask.to_vec(),
            },
            &[a, row],
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = kernels::sum(&self.value(a));
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = kernels::mean(&self.value(a));
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = kernels::transpose(&self.value(a))?;
        let (n, m) = (out.shape()[0], out.shape()[1]);
        Ok(self.push(out, Op::Transpose { a, m, n }, &[a]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn softmax_t(&self, a: Var, axis: usize, temperature: f64) -> Result<Var> {
        let out = kernels::softmax_t(&self.value(a), axis, temperature)?;
        Ok(self.push(
            out,
            Op::Softmax {
                a,
                axis,
                temperature: T::from_f64_lossy(temperature),
            },
            &[a],
        ))
    }

    /// Mean over rows of `-Σ target · ln(max(pred, 1e-12))`.
    pub fn cross_entropy_rows(&self, target: Var, pred: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let (tv, pv) = (&nodes[target.0].value, &nodes[pred.0].value);
        let out = kernels::cross_entropy_rows(tv, pv)?;
        let (rows, _) = tv.as_matrix_dims();
        drop(nodes);
        Ok(self.push(out, Op::CrossEntropy { target, pred, rows }, &[target, pred]))
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        let (_, cols) = av.as_matrix_dims();
        let (out, norms) = kernels::l2_normalize_raw(av.data(), cols)?;
        let out = Tensor::new(av.shape().to_vec(), out)?;
        drop(nodes);
        Ok(self.push(out, Op::L2Normalize { a, norms }, &[a]))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[batch·seq × 3D]` with query, key and value blocks side by
    /// side; head `h` owns columns `h·D/heads .. (h+1)·D/heads` of each
    /// block. Attention never crosses sequence boundaries. Returns
    /// `[batch·seq × D]` with heads concatenated.
    pub fn attention(&self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let x = &nodes[qkv.0].value;
        let (rows, cols) = x.as_matrix_dims();
        if x.rank() != 2 || cols % 3 != 0 || batch == 0 || rows % batch != 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                shape: x.shape().to_vec(),
                reason: format!("expected [batch·seq × 3D] with batch {batch}"),
            });
        }
        let d = cols / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: {heads} heads do not divide width {d}"
            )));
        }
        let seq = rows / batch;
        let (out, probs) = attention_forward(x.data(), batch, seq, heads, d);
        drop(nodes);
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Bicubic resize of an `[H×W×D]` grid.
    pub fn bicubic_resize_2d(&self, a: Var, target: (usize, usize)) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        av.ensure_rank("bicubic_resize_2d", 3)?;
        let s = av.shape();
        let plan = ResizePlan::bicubic((s[0], s[1]), target, s[2])?;
        let out = Tensor::new(vec![target.0, target.1, s[2]], plan.apply(av.data()))?;
        drop(nodes);
        Ok(self.push(out, Op::Resize { a, plan }, &[a]))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar root into every reachable leaf created
    /// with `requires_grad`.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if root_node.value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: root_node.value.shape().to_vec(),
                reason: "root must be a scalar".into(),
            });
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
        }

        let mut store = self.grads.borrow_mut();
        if store.len() < nodes.len() {
            store.resize_with(nodes.len(), || None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !matches!(nodes[i].op, Op::Leaf) || !nodes[i].requires_grad {
                continue;
            }
            match &mut store[i] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a = *a + v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn attention_forward<T: Real>(
    x: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let cols = 3 * d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); batch * seq * d];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut row = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let q = &x[(b * seq + i) * cols + h * dh..][..dh];
                let mut max = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate() {
                    let k = &x[(b * seq + j) * cols + d + h * dh..][..dh];
                    let mut s = T::zero();
                    for (&qa, &ka) in q.iter().zip(k) {
                        s = s + qa * ka;
                    }
                    *r = s * scale;
                    max = max.max(*r);
                }
                let mut total = T::zero();
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    total = total + *r;
                }
                let o = &mut out[(b * seq + i) * d + h * dh..][..dh];
                for (j, r) in row.iter().enumerate() {
                    let p = *r / total;
                    probs[p_base + i * seq + j] = p;
                    let v = &x[(b * seq + j) * cols + 2 * d + h * dh..][..dh];
                    for (oa, &va) in o.iter_mut().zip(v) {
                        *oa = *oa + p * va;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    x: &[T],
    g: &[T],
    probs: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    d: usize,
    dx: &mut [T],
) {
    let dh = d / heads;
    let cols = 3 * d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                let prow = &probs[p_base + i * seq..][..seq];
                // dP and dV
                let mut dot = T::zero();
                for j in 0..seq {
                    let vrow = (b * seq + j) * cols + 2 * d + h * dh;
                    let mut s = T::zero();
                    for c in 0..dh {
                        s = s + gi[c] * x[vrow + c];
                        dx[vrow + c] = dx[vrow + c] + prow[j] * gi[c];
                    }
                    dp[j] = s;
                    dot = dot + s * prow[j];
                }
                // dS, then dQ and dK
                let qrow = (b * seq + i) * cols + h * dh;
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = (b * seq + j) * cols + d + h * dh;
                    for c in 0..dh {
                        dx[qrow + c] = dx[qrow + c] + ds * x[krow + c];
                        dx[krow + c] = dx[krow + c] + ds * x[qrow + c];
                    }
                }
            }
        }
    }
}

fn grad_slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(da) = grad_slot(nodes, grads, *a) {
                kernels::matmul_a_bt_acc(da, g, val(*b), m, n, k);
            }
            if let Some(db) = grad_slot(nodes, grads, *b) {
                kernels::matmul_at_b_acc(db, val(*a), g, m, k, n);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = grad_slot(nodes, grads, v) {
                    for (x, &gv) in d.iter_mut().zip(g) {
                        *x = *x + gv;
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x = *x + gv;
                }
            }
            if let Some(d) = grad_slot(nodes, grads, *b) {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x = *x - gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for ((x, &gv), &o) in d.iter_mut().zip(g).zip(val(*b)) {
                    *x = *x + gv * o;
                }
            }
            if let Some(d) = grad_slot(nodes, grads, *b) {
                for ((x, &gv), &o) in d.iter_mut().zip(g).zip(val(*a)) {
                    *x = *x + gv * o;
                }
            }
        }
        Op::AddRow { a, row } => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x = *x + gv;
                }
            }
            if let Some(d) = grad_slot(nodes, grads, *row) {
                let cols = d.len();
                for (i, &gv) in g.iter().enumerate() {
                    d[i % cols] = d[i % cols] + gv;
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x = *x + gv * *c;
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for ((x, &gv), &xv) in d.iter_mut().zip(g).zip(val(*a)) {
                    *x = *x + gv * kernels::gelu_grad_scalar(xv);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cols,
            stats,
        } => {
            let cols = *cols;
            let rows = g.len() / cols;
            let gam = val(*gamma);
            if let Some(dg) = grad_slot(nodes, grads, *gamma) {
                for (i, &gv) in g.iter().enumerate() {
                    dg[i % cols] = dg[i % cols] + gv * stats.xhat[i];
                }
            }
            if let Some(db) = grad_slot(nodes, grads, *beta) {
                for (i, &gv) in g.iter().enumerate() {
                    db[i % cols] = db[i % cols] + gv;
                }
            }
            if let Some(dx) = grad_slot(nodes, grads, *x) {
                let n = T::from_usize(cols).unwrap();
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xh = &stats.xhat[r * cols..(r + 1) * cols];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for c in 0..cols {
                        let dxh = gr[c] * gam[c];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh[c];
                    }
                    mean_dxh = mean_dxh / n;
                    mean_dxh_xh = mean_dxh_xh / n;
                    let rs = stats.rstd[r];
                    for c in 0..cols {
                        let dxh = gr[c] * gam[c];
                        let v = if stats.floored[r] {
                            rs * (dxh - mean_dxh)
                        } else {
                            rs * (dxh - mean_dxh - xh[c] * mean_dxh_xh)
                        };
                        dx[r * cols + c] = dx[r * cols + c] + v;
                    }
                }
            }
        }
        Op::GatherRows { a, index } => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                let cols = g.len() / index.len();
                for (i, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] = d[src * cols + c] + g[i * cols + c];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                if let Some(d) = grad_slot(nodes, grads, *p) {
                    for (x, &gv) in d.iter_mut().zip(&g[offset..offset + len]) {
                        *x = *x + gv;
                    }
                }
                offset += len;
            }
        }
        Op::ReplaceRows { a, row, mask } => {
            let cols = g.len() / mask.len();
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        for c in 0..cols {
                            d[r * cols + c] = d[r * cols + c] + g[r * cols + c];
                        }
                    }
                }
            }
            if let Some(d) = grad_slot(nodes, grads, *row) {
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for c in 0..cols {
                            d[c] = d[c] + g[r * cols + c];
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for x in d.iter_mut() {
                    *x = *x + g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                let share = g[0] / T::from_usize(d.len()).unwrap();
                for x in d.iter_mut() {
                    *x = *x + share;
                }
            }
        }
        Op::Transpose { a, m, n } => {
            // Output is [n×m]; input [m×n].
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for i in 0..*m {
                    for j in 0..*n {
                        d[i * n + j] = d[i * n + j] + g[j * m + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for (x, &gv) in d.iter_mut().zip(g) {
                    *x = *x + gv;
                }
            }
        }
        Op::Softmax {
            a,
            axis,
            temperature,
        } => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                let y = node.value.data();
                let (outer, n, inner) = kernels::axis_split(node.value.shape(), *axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + g[at(j)] * y[at(j)];
                        }
                        for j in 0..n {
                            let k = at(j);
                            d[k] = d[k] + y[k] * (g[k] - dot) / *temperature;
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { target, pred, rows } => {
            let eps = T::from_f64_lossy(CE_LOG_EPS);
            let share = g[0] / T::from_usize(*rows).unwrap();
            let (tv, pv) = (val(*target), val(*pred));
            if let Some(d) = grad_slot(nodes, grads, *pred) {
                for ((x, &t), &p) in d.iter_mut().zip(tv).zip(pv) {
                    if p > eps {
                        *x = *x - share * t / p;
                    }
                }
            }
            if let Some(d) = grad_slot(nodes, grads, *target) {
                for (x, &p) in d.iter_mut().zip(pv) {
                    *x = *x - share * p.max(eps).ln();
                }
            }
        }
        Op::L2Normalize { a, norms } => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                let y = node.value.data();
                let cols = y.len() / norms.len();
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = d[r * cols + c] + (gr[c] - yr[c] * dot) / norm;
                    }
                }
            }
        }
        Op::Attention {
            qkv,
            batch,
            seq,
            heads,
            probs,
        } => {
            let x = val(*qkv);
            let d = node.value.shape()[1];
            if let Some(dx) = grad_slot(nodes, grads, *qkv) {
                attention_backward(x, g, probs, *batch, *seq, *heads, d, dx);
            }
        }
        Op::Resize { a, plan } => {
            if let Some(d) = grad_slot(nodes, grads, *a) {
                for (x, v) in d.iter_mut().zip(plan.apply_transpose(g)) {
                    *x = *x + v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones_and_square_gives_2x() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_never_receive_gradients() {
        let tape = Tape::<f64>::new();
        let w = tape.param(Tensor::ones(&[2, 2]));
        let c = tape.constant(Tensor::ones(&[2, 2]));
        let y = tape.matmul(w, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).is_some());
        assert!(tape.grad(c).is_none());
        assert!(!tape.requires_grad(c));
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let tape = Tape::<f64>::new();
        let x0 = Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = tape.param(x0.clone());
        let y = tape.softmax_t(x, 1, 0.5).unwrap();
        let z = tape.l2_normalize_rows(y).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(*tape.value(x), x0);
    }

    #[test]
    fn attention_single_head_matches_naive() {
        // One sequence of 3 tokens, width 2, single head.
        let qkv: Vec<f64> = (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 6], qkv.clone()).unwrap());
        let out = tape.attention(x, 1, 1).unwrap();
        let out = tape.value(out).clone();
        for i in 0..3 {
            let q = &qkv[i * 6..i * 6 + 2];
            let scores: Vec<f64> = (0..3)
                .map(|j| {
                    let k = &qkv[j * 6 + 2..j * 6 + 4];
                    (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                let v: f64 = (0..3).map(|j| e[j] / z * qkv[j * 6 + 4 + c]).sum();
                assert!((out.data()[i * 2 + c] - v).abs() < 1e-12);
            }
        }
    }
}
