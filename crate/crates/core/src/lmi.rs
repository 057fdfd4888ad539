//! Explicit Lipschitz LMI for a residual or feedforward block, and its
//! certification by block LDL^T.
//!
//! The assembled matrix is the negation of the usual negative semidefinite
//! form, so the Lipschitz bound holds when it is positive semidefinite. Block
//! `1` is the input difference `dx`, block `j + 1` is the activation output
//! difference `dw_j`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{self, BlockPartition, LdltFactors, Matrix};
use crate::param::{MaterializedBlock, MaterializedFeedforward};
use crate::{fsutil, Error, Result};

/// Slope bounds `(m, L)` of one layer's activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeBounds {
    pub min: f64,
    pub max: f64,
}

impl SlopeBounds {
    pub const UNIT: SlopeBounds = SlopeBounds { min: 0.0, max: 1.0 };
}

#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub lipschitz: f64,
    /// `p x d_0`
    pub a: Matrix,
    /// `p x d_n`
    pub b: Matrix,
    /// `C_j`, `d_j x d_{j-1}`
    pub c: Vec<Matrix>,
    /// Diagonal multipliers per layer, all entries positive.
    pub lambdas: Vec<Vec<f64>>,
    pub slopes: Vec<SlopeBounds>,
}

impl LmiProblem {
    /// Residual block with `Lambda_j = I` and unit slope bounds.
    pub fn residual(block: &MaterializedBlock, lipschitz: f64) -> Self {
        Self::with_unit_multipliers(lipschitz, block.a.clone(), block.b.clone(), block.c.clone())
    }

    /// Feedforward stack: `A = 0`, `B = I`.
    pub fn feedforward(ff: &MaterializedFeedforward, lipschitz: f64) -> Self {
        Self::feedforward_from_weights(ff.c.clone(), lipschitz)
    }

    pub fn feedforward_from_weights(c: Vec<Matrix>, lipschitz: f64) -> Self {
        let d0 = c.first().map(|m| m.cols()).unwrap_or(0);
        let dn = c.last().map(|m| m.rows()).unwrap_or(0);
        Self::with_unit_multipliers(lipschitz, Matrix::zeros(dn, d0), Matrix::identity(dn), c)
    }

    pub fn with_unit_multipliers(lipschitz: f64, a: Matrix, b: Matrix, c: Vec<Matrix>) -> Self {
        let lambdas = c.iter().map(|m| vec![1.0; m.rows()]).collect();
        let slopes = vec![SlopeBounds::UNIT; c.len()];
        Self {
            lipschitz,
            a,
            b,
            c,
            lambdas,
            slopes,
        }
    }

    pub fn partition(&self) -> Result<BlockPartition> {
        let d0 = self.a.cols();
        let sizes = std::iter::once(d0).chain(self.c.iter().map(|m| m.rows())).collect();
        Ok(BlockPartition::new(sizes)?)
    }

    fn validate(&self) -> Result<()> {
        let mismatch = |msg: String| Err(Error::DimensionMismatch(msg));
        if self.c.is_empty() {
            return mismatch("no layers".into());
        }
        if !(self.lipschitz.is_finite() && self.lipschitz > 0.0) {
            return Err(Error::Validation(format!("lipschitz must be positive, got {}", self.lipschitz)));
        }
        if self.lambdas.len() != self.c.len() || self.slopes.len() != self.c.len() {
            return mismatch("one multiplier vector and slope pair per layer required".into());
        }
        let mut prev = self.a.cols();
        for (j, cj) in self.c.iter().enumerate() {
            if cj.cols() != prev {
                return mismatch(format!("C_{} is {:?}, expected {} columns", j + 1, cj.shape(), prev));
            }
            if self.lambdas[j].len() != cj.rows() {
                return mismatch(format!("Lambda_{} has {} entries for {} rows", j + 1, self.lambdas[j].len(), cj.rows()));
            }
            if self.lambdas[j].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Validation(format!("Lambda_{} must be positive", j + 1)));
            }
            let s = self.slopes[j];
            if !(s.min.is_finite() && s.max.is_finite() && s.min <= s.max) {
                return Err(Error::Validation(format!("invalid slope bounds for layer {}", j + 1)));
            }
            prev = cj.rows();
        }
        if self.b.rows() != self.a.rows() || self.b.cols() != prev {
            return mismatch(format!(
                "B is {:?}, expected ({}, {})",
                self.b.shape(),
                self.a.rows(),
                prev
            ));
        }
        Ok(())
    }
}

fn lambda_times(lambda: &[f64], m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| lambda[i] * m[(i, j)])
}

/// Assembles the negated LMI for `y = A x + B w_n`, `w_j = s(C_j w_{j-1} + b_j)`.
pub fn assemble_residual_lmi(prob: &LmiProblem) -> Result<Matrix> {
    prob.validate()?;
    let part = prob.partition()?;
    let n = prob.c.len();
    let total = part.total();
    let mut m = Matrix::zeros(total, total);
    let off = |k: usize| part.offset(k);

    let l2 = prob.lipschitz * prob.lipschitz;
    let mut diag: Vec<Matrix> = Vec::with_capacity(n + 1);
    diag.push(Matrix::scaled_identity(part.sizes()[0], l2).sub(&prob.a.t_matmul(&prob.a)));
    for j in 0..n {
        diag.push(Matrix::diag(&prob.lambdas[j]).scale(2.0));
    }
    for (j, d) in diag.iter_mut().take(n).enumerate() {
        let s = prob.slopes[j];
        let lc = lambda_times(&prob.lambdas[j], &prob.c[j]);
        if s.min * s.max != 0.0 {
            d.add_assign(&prob.c[j].t_matmul(&lc).scale(2.0 * s.min * s.max));
        }
    }
    diag[n] = diag[n].sub(&prob.b.t_matmul(&prob.b));
    for (k, d) in diag.iter().enumerate() {
        m.set_block(off(k), off(k), d);
    }
    for j in 0..n {
        let s = prob.slopes[j];
        let blk = lambda_times(&prob.lambdas[j], &prob.c[j]).scale(-(s.min + s.max));
        add_off_diagonal(&mut m, off(j + 1), off(j), &blk);
    }
    let corner = prob.b.t_matmul(&prob.a).scale(-1.0);
    add_off_diagonal(&mut m, off(n), off(0), &corner);
    Ok(m)
}

/// Adds `blk` at `(r0, c0)` and its transpose at `(c0, r0)`.
fn add_off_diagonal(m: &mut Matrix, r0: usize, c0: usize, blk: &Matrix) {
    for i in 0..blk.rows() {
        for j in 0..blk.cols() {
            m[(r0 + i, c0 + j)] += blk[(i, j)];
            m[(c0 + j, r0 + i)] += blk[(i, j)];
        }
    }
}

/// Feedforward LMI: the residual form with `A = 0`, `B = I`.
pub fn assemble_feedforward_lmi(prob: &LmiProblem) -> Result<Matrix> {
    let dn = prob.c.last().map(|m| m.rows()).unwrap_or(0);
    let d0 = prob.c.first().map(|m| m.cols()).unwrap_or(0);
    let mut p = prob.clone();
    p.a = Matrix::zeros(dn, d0);
    p.b = Matrix::identity(dn);
    assemble_residual_lmi(&p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Certified,
    Refuted,
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub verdict: Verdict,
    /// Smallest eigenvalue over the pivot blocks that were computed.
    pub min_block_eigenvalue: f64,
    /// 1-based index of the first pivot block that is not PSD.
    pub failing_block: Option<usize>,
    /// Factors up to the failing block (all of them when certified).
    pub factors: LdltFactors,
    pub psd_tol: f64,
}

impl Certificate {
    pub fn is_certified(&self) -> bool {
        self.verdict == Verdict::Certified
    }
}

/// Checks `m` for positive semidefiniteness through its block LDL^T pivots.
pub fn certify(m: &Matrix, p: &BlockPartition) -> Result<Certificate> {
    let psd_tol = 1e-8 * linalg::spectral_norm(m).max(1.0);
    let partial = linalg::block_ldlt_partial(m, p)?;
    let mut min_eig = f64::INFINITY;
    let mut failing = None;
    for (k, d) in partial.factors.d_blocks.iter().enumerate() {
        let lo = linalg::min_eigenvalue(d)?;
        min_eig = min_eig.min(lo);
        if failing.is_none() && lo < -psd_tol {
            failing = Some(k + 1);
        }
    }
    if failing.is_none() {
        failing = partial.failed_block;
    }
    Ok(Certificate {
        verdict: if failing.is_some() {
            Verdict::Refuted
        } else {
            Verdict::Certified
        },
        min_block_eigenvalue: min_eig,
        failing_block: failing,
        factors: partial.factors,
        psd_tol,
    })
}

/// Writes `i,j,value` rows for every entry, 17 significant digits.
pub fn dump_matrix(m: &Matrix, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(m.rows() * m.cols() * 32 + 16);
    out.push_str("i,j,value\n");
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let _ = writeln!(out, "{i},{j},{:.16e}", m[(i, j)]);
        }
    }
    fsutil::atomic_write(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_block_diagonal() {
        let c = vec![Matrix::zeros(3, 2)];
        let prob = LmiProblem::with_unit_multipliers(1.0, Matrix::zeros(2, 2), Matrix::zeros(2, 3), c);
        let m = assemble_residual_lmi(&prob).unwrap();
        let mut expected = Matrix::identity(5);
        for i in 2..5 {
            expected[(i, i)] = 2.0;
        }
        assert_eq!(m, expected);
    }

    #[test]
    fn feedforward_zero_weights() {
        let c = vec![Matrix::zeros(3, 2), Matrix::zeros(3, 3), Matrix::zeros(2, 3)];
        let prob = LmiProblem::feedforward_from_weights(c, 1.0);
        let m = assemble_feedforward_lmi(&prob).unwrap();
        let expected = Matrix::diag(&[1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0]);
        assert_eq!(m, expected);
    }

    #[test]
    fn oversized_a_is_refuted() {
        let a = Matrix::diag(&[1.5, 0.0]);
        let prob = LmiProblem::with_unit_multipliers(1.0, a, Matrix::zeros(2, 2), vec![Matrix::zeros(2, 2)]);
        let m = assemble_residual_lmi(&prob).unwrap();
        assert!(linalg::min_eigenvalue(&m).unwrap() < 0.0);
        let cert = certify(&m, &prob.partition().unwrap()).unwrap();
        assert_eq!(cert.verdict, Verdict::Refuted);
        assert_eq!(cert.failing_block, Some(1));
    }

    #[test]
    fn certify_examples() {
        let p = BlockPartition::new(vec![2, 1]).unwrap();
        assert!(certify(&Matrix::identity(3), &p).unwrap().is_certified());
        let p = BlockPartition::new(vec![1, 1]).unwrap();
        let cert = certify(&Matrix::diag(&[1.0, -1.0]), &p).unwrap();
        assert_eq!(cert.verdict, Verdict::Refuted);
        assert_eq!(cert.failing_block, Some(2));
        assert!((cert.min_block_eigenvalue + 1.0).abs() < 1e-15);
    }

    #[test]
    fn symmetric_with_n_equal_one_corner() {
        let a = Matrix::from_rows(&[[0.2, 0.1], [0.0, 0.3]]);
        let b = Matrix::from_rows(&[[0.4], [-0.1]]);
        let c = vec![Matrix::from_rows(&[[0.5, -0.2]])];
        let prob = LmiProblem::with_unit_multipliers(1.0, a.clone(), b.clone(), c.clone());
        let m = assemble_residual_lmi(&prob).unwrap();
        assert_eq!(m.asymmetry(), 0.0);
        // the corner and the sub-diagonal share block (2, 1)
        let expected = c[0].scale(-1.0).sub(&b.t_matmul(&a));
        assert!(m.block(2, 0, 1, 2).sub(&expected).max_abs() < 1e-16);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let prob = LmiProblem::with_unit_multipliers(
            1.0,
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 4),
            vec![Matrix::zeros(3, 2)],
        );
        assert!(matches!(assemble_residual_lmi(&prob), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn dump_writes_all_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = Matrix::from_rows(&[[1.0, 1.0 / 3.0], [1.0 / 3.0, 2.0]]);
        dump_matrix(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "i,j,value");
        assert_eq!(lines.len(), 5);
        let v: f64 = lines[2].split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(v, 1.0 / 3.0);
    }
}
