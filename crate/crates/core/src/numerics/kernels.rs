//! Forward kernels over plain tensors.
//!
//! Every function here is pure. The differentiable versions on
//! [`Tape`](super::Tape) call into these and add a reverse-mode rule.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking their log.
pub const CE_LOG_EPS: f64 = 1e-12;
/// Rows with a Euclidean norm at or below this are rejected by normalization.
pub const L2_NORM_EPS: f64 = 1e-12;
/// Variance floor of layer normalization; constant rows normalize to zero.
pub const LN_VAR_FLOOR: f64 = 1e-5;

/// `c[m×n] = a[m×k] · b[k×n]`, accumulated in ascending `k` order.
pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_a_bt_acc<T: Real>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_b_acc<T: Real>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

fn zip_same<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Real>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x * c)
}

/// Adds a `[d]` row vector to every row of an `[..., d]` tensor.
pub fn add_row<T: Real>(a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = a.as_matrix_dims();
    if row.numel() != cols {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            lhs: a.shape().to_vec(),
            rhs: row.shape().to_vec(),
        });
    }
    let r = row.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x + r[i % cols])
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation.
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn gelu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(gelu_scalar)
}

/// Per-row statistics saved by the layer-norm forward pass.
pub(crate) struct LayerNormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
    /// Rows whose variance hit the floor; their `rstd` is a constant.
    pub floored: Vec<bool>,
}

pub(crate) fn layer_norm_raw<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    cols: usize,
) -> (Vec<T>, LayerNormStats<T>) {
    let rows = x.len() / cols;
    let n = T::from_usize(cols).unwrap();
    let floor = T::from_f64_lossy(LN_VAR_FLOOR);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let mut floored = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is_floored = var < floor;
        let rs = T::one() / if is_floored { floor } else { var }.sqrt();
        for c in 0..cols {
            let h = (xr[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
        rstd.push(rs);
        floored.push(is_floored);
    }
    (out, LayerNormStats { xhat, rstd, floored })
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = x.as_matrix_dims();
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let (out, _) = layer_norm_raw(x.data(), gamma.data(), beta.data(), cols);
    Tensor::new(x.shape().to_vec(), out)
}

/// Rows of a matrix selected (with repetition) by `index`.
pub fn gather_rows<T: Real>(a: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let (rows, cols) = a.as_matrix_dims();
    if index.is_empty() {
        return Err(Error::invalid("gather_rows: empty index"));
    }
    let mut data = Vec::with_capacity(index.len() * cols);
    for &i in index {
        if i >= rows {
            return Err(Error::invalid(format!(
                "gather_rows: row {i} out of range for {:?}",
                a.shape()
            )));
        }
        data.extend_from_slice(a.row(i));
    }
    Tensor::new(vec![index.len(), cols], data)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    a.ensure_rank("transpose", 2)?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut data = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(vec![n, m], data)
}

pub fn sum<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(a.data().iter().copied().sum())
}

pub fn mean<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let n = T::from_usize(a.numel()).unwrap();
    Tensor::scalar(a.data().iter().copied().sum::<T>() / n)
}

/// Mean over rows: `[n×d] -> [d]`.
pub fn mean_rows<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = a.as_matrix_dims();
    let mut acc = vec![T::zero(); cols];
    for r in 0..rows {
        for (s, &v) in acc.iter_mut().zip(a.row(r)) {
            *s = *s + v;
        }
    }
    let n = T::from_usize(rows).unwrap();
    Tensor::new(vec![cols], acc.into_iter().map(|s| s / n).collect()).unwrap()
}

/// Outer/axis/inner extents for iterating slices along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_raw<T: Real>(x: &[T], shape: &[usize], axis: usize, temperature: T) -> Vec<T> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = ((x[at(j)] - max) / temperature).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    out
}

/// Temperature softmax along `axis`, stabilized by max subtraction.
pub fn softmax_t<T: Real>(logits: &Tensor<T>, axis: usize, temperature: f64) -> Result<Tensor<T>> {
    check_softmax_args(logits, axis, temperature)?;
    let out = softmax_raw(
        logits.data(),
        logits.shape(),
        axis,
        T::from_f64_lossy(temperature),
    );
    Tensor::new(logits.shape().to_vec(), out)
}

pub(crate) fn check_softmax_args<T: Real>(logits: &Tensor<T>, axis: usize, temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if axis >= logits.rank() {
        return Err(Error::InvalidShape {
            op: "softmax_t",
            shape: logits.shape().to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    logits.ensure_finite("softmax_t input")
}

pub(crate) fn check_distributions<T: Real>(target: &Tensor<T>, prediction: &Tensor<T>) -> Result<()> {
    if target.shape() != prediction.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_rows",
            lhs: target.shape().to_vec(),
            rhs: prediction.shape().to_vec(),
        });
    }
    for (name, t) in [("target", target), ("prediction", prediction)] {
        t.ensure_finite(name)?;
        if t.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid(format!(
                "cross_entropy_rows: negative entries in {name}"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `-Σ target · ln(max(prediction, CE_LOG_EPS))`.
pub fn cross_entropy_rows<T: Real>(target: &Tensor<T>, prediction: &Tensor<T>) -> Result<Tensor<T>> {
    check_distributions(target, prediction)?;
    let (rows, _) = target.as_matrix_dims();
    let eps = T::from_f64_lossy(CE_LOG_EPS);
    let total: T = target
        .data()
        .iter()
        .zip(prediction.data())
        .map(|(&t, &p)| -t * p.max(eps).ln())
        .sum();
    Ok(Tensor::scalar(total / T::from_usize(rows).unwrap()))
}

pub(crate) fn l2_normalize_raw<T: Real>(x: &[T], cols: usize) -> Result<(Vec<T>, Vec<T>)> {
    let rows = x.len() / cols;
    let eps = T::from_f64_lossy(L2_NORM_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > eps) {
            return Err(Error::invalid(format!(
                "l2_normalize_rows: row {r} has norm {norm} at or below {L2_NORM_EPS:e}"
            )));
        }
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = v / norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Scales every last-axis vector to unit Euclidean norm.
pub fn l2_normalize_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = x.as_matrix_dims();
    let (out, _) = l2_normalize_raw(x.data(), cols)?;
    Tensor::new(x.shape().to_vec(), out)
}
