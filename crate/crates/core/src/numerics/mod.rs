//! Dense arrays, the forward op set used by the backbone and losses, a
//! reverse-mode tape, and a central-difference gradient checker.
//!
//! Model code is written once against [`Backend`]: the [`Tape`] records
//! every op for training, [`Eager`] just computes (inference, KV-cached
//! decoding).

mod gradcheck;
pub mod kernels;
pub mod special;
mod tape;
mod tensor;

use std::sync::Arc;

use thiserror::Error;

pub use gradcheck::{check_coordinates, finite_difference_check, CoordinateCheck, GradCheckReport};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::sampler::RngStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Boolean attention pattern: `allowed(i, j)` lets query `i` read key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Lower-triangular mask over `n` positions.
    pub fn causal(n: usize) -> Self {
        Self::causal_with_past(n, 0)
    }

    /// `new` queries appended after `past` cached keys; query `i` sees keys
    /// `0..=past + i`.
    pub fn causal_with_past(new: usize, past: usize) -> Self {
        let cols = new + past;
        let allowed = (0..new)
            .flat_map(|i| (0..cols).map(move |j| j <= past + i))
            .collect();
        Self {
            rows: new,
            cols,
            allowed,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self { rows, cols, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| self.allowed(i, j) == (j <= i)))
    }
}

/// Op set the model is written against.
pub trait Backend {
    type V: Clone;

    /// Wraps a constant (never differentiated).
    fn input(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn add_row(&mut self, a: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matmul_nt(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Result<Self::V>;
    fn softmax(&mut self, a: &Self::V) -> Self::V;
    fn layer_norm(&mut self, x: &Self::V, gain: &Self::V, bias: &Self::V) -> Result<Self::V>;
    fn conv1d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V, kernel: usize) -> Result<Self::V>;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn softplus(&mut self, a: &Self::V) -> Self::V;
    fn ln(&mut self, a: &Self::V) -> Self::V;
    fn exp(&mut self, a: &Self::V) -> Self::V;
    fn abs(&mut self, a: &Self::V) -> Self::V;
    fn square(&mut self, a: &Self::V) -> Self::V;
    fn ln_gamma(&mut self, a: &Self::V) -> Self::V;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean(&mut self, a: &Self::V) -> Self::V;
    fn dropout(&mut self, a: &Self::V, p: f64, rng: &mut RngStream) -> Result<Self::V>;
    fn masked_scores(
        &mut self,
        q: &Self::V,
        k: &Self::V,
        mask: &Arc<AttentionMask>,
        scale: f64,
    ) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_rows(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn slice_cols(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V>;
    fn gather_rows(&mut self, table: &Self::V, ids: &[usize]) -> Result<Self::V>;

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        let xw = self.matmul(x, w)?;
        self.add_row(&xw, b)
    }
}

/// Computes values immediately and keeps no history.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type V = Tensor;

    fn input(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::add(a, b)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::sub(a, b)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::mul(a, b)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        kernels::scale(a, c)
    }
    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        kernels::add_scalar(a, c)
    }
    fn add_row(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        kernels::add_row(a, bias)
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::matmul(a, b)
    }
    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        kernels::matmul_nt(a, b)
    }
    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        kernels::transpose(a)
    }
    fn softmax(&mut self, a: &Tensor) -> Tensor {
        kernels::softmax_rows(a)
    }
    fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        kernels::layer_norm(x, gain, bias).map(|(y, _)| y)
    }
    fn conv1d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, kernel: usize) -> Result<Tensor> {
        kernels::conv1d(x, w, b, kernel)
    }
    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        kernels::sigmoid_map(a)
    }
    fn tanh(&mut self, a: &Tensor) -> Tensor {
        kernels::tanh_map(a)
    }
    fn relu(&mut self, a: &Tensor) -> Tensor {
        kernels::relu(a)
    }
    fn softplus(&mut self, a: &Tensor) -> Tensor {
        kernels::softplus_map(a)
    }
    fn ln(&mut self, a: &Tensor) -> Tensor {
        kernels::ln(a)
    }
    fn exp(&mut self, a: &Tensor) -> Tensor {
        kernels::exp(a)
    }
    fn abs(&mut self, a: &Tensor) -> Tensor {
        kernels::abs(a)
    }
    fn square(&mut self, a: &Tensor) -> Tensor {
        kernels::square(a)
    }
    fn ln_gamma(&mut self, a: &Tensor) -> Tensor {
        kernels::ln_gamma_map(a)
    }
    fn sum(&mut self, a: &Tensor) -> Tensor {
        kernels::sum(a)
    }
    fn mean(&mut self, a: &Tensor) -> Tensor {
        kernels::mean(a)
    }
    fn dropout(&mut self, a: &Tensor, p: f64, rng: &mut RngStream) -> Result<Tensor> {
        kernels::dropout(a, p, rng).map(|(y, _)| y)
    }
    fn masked_scores(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        mask: &Arc<AttentionMask>,
        scale: f64,
    ) -> Result<Tensor> {
        kernels::masked_scores(q, k, mask, scale)
    }
    fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        kernels::concat_rows(&refs)
    }
    fn slice_rows(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        kernels::slice_rows(a, start, len)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        kernels::concat_cols(&refs)
    }
    fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        kernels::slice_cols(a, start, len)
    }
    fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        kernels::gather_rows(table, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_shapes() {
        let m = AttentionMask::causal(4);
        assert!(m.is_lower_triangular());
        let cached = AttentionMask::causal_with_past(2, 3);
        assert_eq!((cached.rows(), cached.cols()), (2, 5));
        assert!(cached.allowed(0, 3) && !cached.allowed(0, 4) && cached.allowed(1, 4));
    }
}
