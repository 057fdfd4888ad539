//! Matrix operations shared by eager evaluation and the reverse-mode tape.
//!
//! Materialization and the forward pass are written once against
//! [`Backend`]; running them on [`Eager`] gives values, running them on
//! [`crate::autodiff::Tape`] also records the graph for gradients.

use crate::activation::ActivationSpec;
use crate::linalg::{self, LinalgError, Matrix, Side, Transpose, Uplo};

pub trait Backend {
    type M: Clone;

    fn constant(&mut self, m: Matrix) -> Self::M;
    fn value<'a>(&'a self, x: &'a Self::M) -> &'a Matrix;

    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    /// `a * b^T`
    fn matmul_t(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    /// `a^T * b`
    fn t_matmul(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn transpose(&mut self, a: &Self::M) -> Self::M;
    fn add(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn sub(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn scale(&mut self, a: &Self::M, s: f64) -> Self::M;
    /// `a + s I`
    fn add_identity(&mut self, a: &Self::M, s: f64) -> Self::M;
    fn cholesky_upper(&mut self, a: &Self::M) -> Result<Self::M, LinalgError>;
    fn solve_triangular(
        &mut self,
        r: &Self::M,
        uplo: Uplo,
        b: &Self::M,
        side: Side,
        trans: Transpose,
    ) -> Result<Self::M, LinalgError>;
    /// Adds the `1 x d` row `bias` to every row of `x`.
    fn add_row(&mut self, x: &Self::M, bias: &Self::M) -> Self::M;
    fn activate(&mut self, x: &Self::M, act: &ActivationSpec) -> Self::M;
    /// `1 x 1` matrix holding `sqrt(2 alpha / (alpha + ||w||_2^2))`.
    fn spectral_factor(&mut self, w: &Self::M, alpha: f64) -> Self::M;
    /// Multiplies `x` by the `1 x 1` matrix `s`.
    fn scale_by(&mut self, x: &Self::M, s: &Self::M) -> Self::M;
    /// `1 x 1` mean over rows of `-w[y] * log softmax(logits)[y]`.
    fn weighted_cross_entropy(&mut self, logits: &Self::M, labels: &[usize], weights: &[f64]) -> Self::M;
}

/// Plain evaluation, no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Backend for Eager {
    type M = Matrix;

    fn constant(&mut self, m: Matrix) -> Matrix {
        m
    }

    fn value<'a>(&'a self, x: &'a Matrix) -> &'a Matrix {
        x
    }

    fn matmul(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.matmul(b)
    }

    fn matmul_t(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.matmul_t(b)
    }

    fn t_matmul(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.t_matmul(b)
    }

    fn transpose(&mut self, a: &Matrix) -> Matrix {
        a.transpose()
    }

    fn add(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.add(b)
    }

    fn sub(&mut self, a: &Matrix, b: &Matrix) -> Matrix {
        a.sub(b)
    }

    fn scale(&mut self, a: &Matrix, s: f64) -> Matrix {
        a.scale(s)
    }

    fn add_identity(&mut self, a: &Matrix, s: f64) -> Matrix {
        a.add_identity(s)
    }

    fn cholesky_upper(&mut self, a: &Matrix) -> Result<Matrix, LinalgError> {
        linalg::cholesky_upper(a)
    }

    fn solve_triangular(
        &mut self,
        r: &Matrix,
        uplo: Uplo,
        b: &Matrix,
        side: Side,
        trans: Transpose,
    ) -> Result<Matrix, LinalgError> {
        linalg::solve_triangular(r, uplo, b, side, trans)
    }

    fn add_row(&mut self, x: &Matrix, bias: &Matrix) -> Matrix {
        add_row(x, bias)
    }

    fn activate(&mut self, x: &Matrix, act: &ActivationSpec) -> Matrix {
        x.map(|v| act.apply(v))
    }

    fn spectral_factor(&mut self, w: &Matrix, alpha: f64) -> Matrix {
        let sigma = linalg::spectral_norm(w);
        Matrix::from_raw(1, 1, vec![spectral_factor_value(sigma, alpha)])
    }

    fn scale_by(&mut self, x: &Matrix, s: &Matrix) -> Matrix {
        x.scale(s[(0, 0)])
    }

    fn weighted_cross_entropy(&mut self, logits: &Matrix, labels: &[usize], weights: &[f64]) -> Matrix {
        let (loss, _) = cross_entropy_with_probs(logits, labels, weights);
        Matrix::from_raw(1, 1, vec![loss])
    }
}

pub(crate) fn spectral_factor_value(sigma: f64, alpha: f64) -> f64 {
    (2.0 * alpha / (alpha + sigma * sigma)).sqrt()
}

pub(crate) fn add_row(x: &Matrix, bias: &Matrix) -> Matrix {
    assert_eq!(bias.rows(), 1, "bias must be a row vector");
    assert_eq!(bias.cols(), x.cols(), "bias width mismatch");
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    out
}

/// Row-wise softmax, computed stably.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

pub(crate) fn cross_entropy_with_probs(logits: &Matrix, labels: &[usize], weights: &[f64]) -> (f64, Matrix) {
    assert_eq!(logits.rows(), labels.len(), "one label per row");
    let n = logits.rows().max(1) as f64;
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += weights[y] * (lse - row[y]);
    }
    (total / n, probs)
}
