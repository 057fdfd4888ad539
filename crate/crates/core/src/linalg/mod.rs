//! Dense linear algebra kernels.
//!
//! Production code paths use Cholesky factors and triangular solves only.
//! The eigensolver and symmetric square root are trusted oracles for
//! verification and tests.

mod decomp;
mod eigen;
mod matrix;

pub use decomp::{
    block_ldlt, block_ldlt_partial, cholesky_upper, solve_triangular, BlockPartition, LdltFactors,
    PartialLdlt, Side, Transpose, Uplo,
};
pub use eigen::{min_eigenvalue, spectral_norm, sqrt_psd, sym_eig, SymEig};
pub use matrix::{Matrix, PARALLEL_MIN_FLOPS};

/// Smallest admissible Cholesky pivot.
pub const PD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("pivot block {0} is not invertible")]
    SingularPivotBlock(usize),
    #[error("eigensolver did not converge after {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("triangular matrix has a zero diagonal entry at {index}")]
    SingularTriangular { index: usize },
    #[error("invalid block partition: {0}")]
    InvalidPartition(String),
}
