//! Eager forward kernels. The tape records these and supplies adjoints; the
//! inference path calls them directly.

use super::special::{ln_gamma, sigmoid, softplus};
use super::{AttentionMask, NumericsError, Result, Tensor};
use crate::sampler::RngStream;

/// Finite stand-in for `-inf` on masked attention logits; `exp` of it
/// underflows to exactly zero after the max shift.
pub const MASKED_LOGIT: f64 = -1e30;

/// `C = alpha * op(A) op(B) + beta * C` on row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin each buffer to exactly the extent the
    // strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().len() {
        1 | 2 => Ok((t.rows(), t.cols())),
        _ => Err(NumericsError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a matrix or vector".into(),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(zip(a, b, |x, y| x + y))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    Ok(zip(a, b, |x, y| x - y))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(zip(a, b, |x, y| x * y))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v + c)
}

/// Adds a length-`cols` vector to every row.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = require_matrix("add_row", a)?;
    if bias.len() != cols {
        return Err(NumericsError::ShapeMismatch {
            op: "add_row",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = a.data().to_vec();
    for r in 0..rows {
        for (o, b) in out[r * cols..(r + 1) * cols].iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 || b.shape().len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `A Bᵀ` for `A: m×k`, `B: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), true, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = require_matrix("transpose", a)?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// `x W + b`, with `W: in×out` and `b: out`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_row(&matmul(x, w)?, b)
}

pub fn softmax_rows(a: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(cols.max(1)) {
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
    Tensor::from_parts(a.shape().to_vec(), out)
}

/// Per-row statistics kept for the layer-norm adjoint.
#[derive(Clone, Debug)]
pub struct LayerNormStats {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, LayerNormStats)> {
    let (rows, cols) = require_matrix("layer_norm", x)?;
    if gain.len() != cols || bias.len() != cols {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut normalized = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = rstd;
        for c in 0..cols {
            let n = (row[c] - mean) * rstd;
            normalized[r * cols + c] = n;
            out[r * cols + c] = n * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        LayerNormStats { normalized, inv_std },
    ))
}

/// Unfolds `x: T×C` into `T×(K·C)` windows with zero "same" padding.
pub(crate) fn im2col(x: &[f64], t: usize, c: usize, kernel: usize) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let mut cols = vec![0.0; t * kernel * c];
    for i in 0..t {
        for k in 0..kernel {
            let src = i as isize + k as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            cols[i * kernel * c + k * c..i * kernel * c + (k + 1) * c]
                .copy_from_slice(&x[src * c..(src + 1) * c]);
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], t: usize, c: usize, kernel: usize) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let mut x = vec![0.0; t * c];
    for i in 0..t {
        for k in 0..kernel {
            let src = i as isize + k as isize - pad as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                x[src * c + ch] += cols[i * kernel * c + k * c + ch];
            }
        }
    }
    x
}

/// 1-D convolution over time with odd `kernel` and "same" zero padding.
///
/// `x: T×Cin`, `w: (kernel·Cin)×Cout` laid out tap-major, `b: Cout`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, kernel: usize) -> Result<Tensor> {
    let (t, cin) = require_matrix("conv1d", x)?;
    let (wk, cout) = require_matrix("conv1d", w)?;
    if kernel % 2 == 0 || wk != kernel * cin || b.len() != cout {
        return Err(NumericsError::ShapeMismatch {
            op: "conv1d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let cols = im2col(x.data(), t, cin, kernel);
    let mut out = vec![0.0; t * cout];
    gemm(t, kernel * cin, cout, &cols, false, w.data(), false, &mut out, 0.0);
    add_row(&Tensor::from_parts(vec![t, cout], out), b)
}

pub fn sigmoid_map(a: &Tensor) -> Tensor {
    a.map(sigmoid)
}

pub fn tanh_map(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn softplus_map(a: &Tensor) -> Tensor {
    a.map(softplus)
}

/// Natural log with the argument floored at the smallest positive normal.
pub fn ln(a: &Tensor) -> Tensor {
    a.map(|v| v.max(f64::MIN_POSITIVE).ln())
}

/// `exp` with the argument capped so the result stays finite.
pub fn exp(a: &Tensor) -> Tensor {
    a.map(|v| v.min(700.0).exp())
}

pub fn abs(a: &Tensor) -> Tensor {
    a.map(f64::abs)
}

pub fn square(a: &Tensor) -> Tensor {
    a.map(|v| v * v)
}

pub fn ln_gamma_map(a: &Tensor) -> Tensor {
    a.map(ln_gamma)
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum::<f64>() / a.len().max(1) as f64)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1/(1-p)`) so the adjoint can replay it.
pub fn dropout(a: &Tensor, p: f64, rng: &mut RngStream) -> Result<(Tensor, Vec<f64>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumericsError::InvalidArgument {
            op: "dropout",
            reason: format!("probability {p} outside [0, 1)"),
        });
    }
    let keep_scale = 1.0 / (1.0 - p);
    let multiplier: Vec<f64> = (0..a.len())
        .map(|_| if rng.uniform() < p { 0.0 } else { keep_scale })
        .collect();
    let out = a.data().iter().zip(&multiplier).map(|(v, m)| v * m).collect();
    Ok((Tensor::from_parts(a.shape().to_vec(), out), multiplier))
}

/// Scaled dot-product logits `scale · Q Kᵀ`, with disallowed pairs set to
/// [`MASKED_LOGIT`].
pub fn masked_scores(q: &Tensor, k: &Tensor, mask: &AttentionMask, scale_by: f64) -> Result<Tensor> {
    let scores = matmul_nt(q, k)?;
    if mask.rows() != scores.rows() || mask.cols() != scores.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "masked_scores",
            lhs: scores.shape().to_vec(),
            rhs: vec![mask.rows(), mask.cols()],
        });
    }
    let cols = scores.cols();
    let mut data = scores.into_vec();
    for (idx, v) in data.iter_mut().enumerate() {
        *v = if mask.allowed(idx / cols, idx % cols) {
            *v * scale_by
        } else {
            MASKED_LOGIT
        };
    }
    Ok(Tensor::from_parts(vec![mask.rows(), cols], data))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![rows, cols], data))
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let cols = a.cols();
    if start + len > a.rows() {
        return Err(NumericsError::InvalidShape {
            op: "slice_rows",
            shape: a.shape().to_vec(),
            reason: format!("rows {start}..{} out of range", start + len),
        });
    }
    Ok(Tensor::from_parts(
        vec![len, cols],
        a.data()[start * cols..(start + len) * cols].to_vec(),
    ))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts.first().map_or(0, |t| t.rows());
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    for p in parts {
        if p.rows() != rows {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Ok(Tensor::from_parts(vec![rows, total], data))
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = require_matrix("slice_cols", a)?;
    if start + len > cols {
        return Err(NumericsError::InvalidShape {
            op: "slice_cols",
            shape: a.shape().to_vec(),
            reason: format!("columns {start}..{} out of range", start + len),
        });
    }
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&a.row(r)[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![rows, len], data))
}

/// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let cols = table.cols();
    let mut data = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        if id >= table.rows() {
            return Err(NumericsError::InvalidArgument {
                op: "gather_rows",
                reason: format!("index {id} out of range for {} rows", table.rows()),
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), cols], data))
}
