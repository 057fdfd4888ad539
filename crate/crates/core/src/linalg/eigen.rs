use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LinalgError, Matrix};

const POWER_SEED: u64 = 0x005e_ed0f_5bec;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_REL_TOL: f64 = 1e-12;

/// Eigenvalues in ascending order with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    /// `V diag(f(λ)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let scaled = Matrix::from_fn(self.vectors.rows(), self.vectors.cols(), |i, j| {
            self.vectors[(i, j)] * f(self.values[j])
        });
        scaled.matmul_t(&self.vectors).symmetrize()
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices. Verification oracle.
pub fn sym_eig(a: &Matrix) -> Result<SymEig, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::ShapeMismatch {
            op: "sym_eig",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let max_sweeps = (100 * n).max(1);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                if apq.abs() <= f64::EPSILON * (app * aqq).abs().sqrt() || apq.abs() <= 1e-18 * scale {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(LinalgError::ConvergenceFailure { sweeps: max_sweeps });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Matrix) -> Result<f64, LinalgError> {
    Ok(sym_eig(a)?.values.first().copied().unwrap_or(0.0))
}

/// Unique symmetric PSD square root. Slightly negative eigenvalues are clamped to zero.
pub fn sqrt_psd(a: &Matrix) -> Result<Matrix, LinalgError> {
    let eig = sym_eig(a)?;
    let norm = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lo = eig.values.first().copied().unwrap_or(0.0);
    if lo < -1e-10 * norm {
        return Err(LinalgError::NotPsd { min_eigenvalue: lo });
    }
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

/// Largest singular value, by power iteration on the smaller Gram matrix.
/// Falls back to the eigensolver when the iteration does not settle.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.rows() == 0 || a.cols() == 0 {
        return 0.0;
    }
    let gram = if a.cols() <= a.rows() {
        a.t_matmul(a)
    } else {
        a.matmul_t(a)
    };
    if gram.max_abs() == 0.0 {
        return 0.0;
    }
    power_iteration(&gram)
        .or_else(|| {
            sym_eig(&gram)
                .ok()
                .and_then(|e| e.values.last().copied())
        })
        .map(|l| l.max(0.0).sqrt())
        .unwrap_or_else(|| gram.frobenius_norm().sqrt())
}

fn power_iteration(g: &Matrix) -> Option<f64> {
    let n = g.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v)?;
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let w = g.matvec(&v);
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if (lambda - prev).abs() <= POWER_REL_TOL * lambda.abs() && residual <= 1e-9 * lambda.abs() {
            return Some(lambda);
        }
        prev = lambda;
        v = w;
        normalize(&mut v)?;
    }
    None
}

fn normalize(v: &mut [f64]) -> Option<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(())
}
