use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LinalgError, Matrix, PD_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Uplo {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Solve `op(r) * X = b`.
    Left,
    /// Solve `X * op(r) = b`.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// Upper Cholesky factor `R` with `R^T R = a`. The input is symmetrized first.
pub fn cholesky_upper(a: &Matrix) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::ShapeMismatch {
            op: "cholesky_upper",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let n = a.rows();
    let s = a.symmetrize();
    let mut r = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= r[(k, j)] * r[(k, j)];
        }
        if d.is_nan() || d <= PD_FLOOR {
            return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
        }
        let rjj = d.sqrt();
        r[(j, j)] = rjj;
        for i in j + 1..n {
            let mut v = s[(j, i)];
            for k in 0..j {
                v -= r[(k, j)] * r[(k, i)];
            }
            r[(j, i)] = v / rjj;
        }
    }
    Ok(r)
}

/// Solves a triangular system without forming an inverse.
///
/// With `Side::Left` returns `X` such that `op(r) X = b`; with `Side::Right`
/// returns `X` such that `X op(r) = b`, where `op` is the identity or the
/// transpose.
pub fn solve_triangular(
    r: &Matrix,
    uplo: Uplo,
    b: &Matrix,
    side: Side,
    trans: Transpose,
) -> Result<Matrix, LinalgError> {
    let n = r.rows();
    if !r.is_square() {
        return Err(LinalgError::ShapeMismatch {
            op: "solve_triangular",
            left: r.shape(),
            right: b.shape(),
        });
    }
    if let Some(index) = (0..n).find(|&i| r[(i, i)] == 0.0) {
        return Err(LinalgError::SingularTriangular { index });
    }
    match side {
        Side::Left => {
            if b.rows() != n {
                return Err(LinalgError::ShapeMismatch {
                    op: "solve_triangular",
                    left: r.shape(),
                    right: b.shape(),
                });
            }
            Ok(solve_left(r, uplo, trans, b))
        }
        Side::Right => {
            if b.cols() != n {
                return Err(LinalgError::ShapeMismatch {
                    op: "solve_triangular",
                    left: r.shape(),
                    right: b.shape(),
                });
            }
            // X op(r) = b  <=>  op(r)^T X^T = b^T
            let flipped = match trans {
                Transpose::No => Transpose::Yes,
                Transpose::Yes => Transpose::No,
            };
            Ok(solve_left(r, uplo, flipped, &b.transpose()).transpose())
        }
    }
}

fn solve_left(r: &Matrix, uplo: Uplo, trans: Transpose, b: &Matrix) -> Matrix {
    let n = r.rows();
    let m = b.cols();
    let transposed = trans == Transpose::Yes;
    let at = |i: usize, k: usize| if transposed { r[(k, i)] } else { r[(i, k)] };
    let lower = (uplo == Uplo::Lower) != transposed;
    let mut x = b.clone();
    let order: Box<dyn Iterator<Item = usize>> = if lower {
        Box::new(0..n)
    } else {
        Box::new((0..n).rev())
    };
    for i in order {
        let diag = at(i, i);
        let (lo, hi) = if lower { (0, i) } else { (i + 1, n) };
        for c in 0..m {
            let mut v = x[(i, c)];
            for k in lo..hi {
                v -= at(i, k) * x[(k, c)];
            }
            x[(i, c)] = v / diag;
        }
    }
    x
}

/// Block sizes of a symmetric block matrix, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    sizes: Vec<usize>,
}

impl BlockPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self, LinalgError> {
        if sizes.is_empty() {
            return Err(LinalgError::InvalidPartition("no blocks".into()));
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(LinalgError::InvalidPartition(format!("block {} is empty", k + 1)));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_blocks(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Row offset of block `k` (0-based).
    pub fn offset(&self, k: usize) -> usize {
        self.sizes[..k].iter().sum()
    }
}

/// Block LDL^T factors. Absent `l_blocks` entries are zero blocks; indices are 0-based.
#[derive(Debug, Clone)]
pub struct LdltFactors {
    pub partition: BlockPartition,
    pub l_blocks: BTreeMap<(usize, usize), Matrix>,
    pub d_blocks: Vec<Matrix>,
}

impl LdltFactors {
    pub fn l_block(&self, i: usize, j: usize) -> Option<&Matrix> {
        self.l_blocks.get(&(i, j))
    }

    /// Assembles the full unit lower triangular factor.
    pub fn lower(&self) -> Matrix {
        let n = self.partition.total();
        let mut l = Matrix::identity(n);
        for (&(i, j), blk) in &self.l_blocks {
            l.set_block(self.partition.offset(i), self.partition.offset(j), blk);
        }
        l
    }

    pub fn block_diagonal(&self) -> Matrix {
        let n = self.partition.total();
        let mut d = Matrix::zeros(n, n);
        for (k, blk) in self.d_blocks.iter().enumerate() {
            let o = self.partition.offset(k);
            d.set_block(o, o, blk);
        }
        d
    }

    /// `L D L^T`.
    pub fn reconstruct(&self) -> Matrix {
        let l = self.lower();
        l.matmul(&self.block_diagonal()).matmul_t(&l)
    }
}

/// Factors produced up to (and including) the first pivot block that could
/// not be inverted.
#[derive(Debug, Clone)]
pub struct PartialLdlt {
    pub factors: LdltFactors,
    /// 1-based index of the singular pivot block, if any.
    pub failed_block: Option<usize>,
}

/// Block LDL^T of a symmetric matrix. Pivot blocks are inverted through
/// their Cholesky factors; the last block is never inverted.
pub fn block_ldlt(m: &Matrix, p: &BlockPartition) -> Result<LdltFactors, LinalgError> {
    let partial = block_ldlt_partial(m, p)?;
    match partial.failed_block {
        Some(k) => Err(LinalgError::SingularPivotBlock(k)),
        None => Ok(partial.factors),
    }
}

/// Like [`block_ldlt`] but stops at the first singular pivot and returns
/// what was computed so far. Errors only on shape problems.
pub fn block_ldlt_partial(m: &Matrix, p: &BlockPartition) -> Result<PartialLdlt, LinalgError> {
    if !m.is_square() || m.rows() != p.total() {
        return Err(LinalgError::ShapeMismatch {
            op: "block_ldlt",
            left: m.shape(),
            right: (p.total(), p.total()),
        });
    }
    let m = m.symmetrize();
    let nb = p.num_blocks();
    let blk = |i: usize, j: usize| {
        m.block(p.offset(i), p.offset(j), p.sizes()[i], p.sizes()[j])
    };
    let mut l_blocks: BTreeMap<(usize, usize), Matrix> = BTreeMap::new();
    let mut d_blocks: Vec<Matrix> = Vec::with_capacity(nb);
    // L_ij D_j for stored l_blocks, reused in the Schur updates.
    let mut ld: BTreeMap<(usize, usize), Matrix> = BTreeMap::new();

    for k in 0..nb {
        let mut dk = blk(k, k);
        for j in 0..k {
            if let (Some(lkj), Some(ldkj)) = (l_blocks.get(&(k, j)), ld.get(&(k, j))) {
                dk = dk.sub(&ldkj.matmul_t(lkj));
            }
        }
        let dk = dk.symmetrize();
        d_blocks.push(dk.clone());
        if k + 1 == nb {
            break;
        }
        let rk = match cholesky_upper(&dk) {
            Ok(r) => r,
            Err(_) => {
                return Ok(PartialLdlt {
                    factors: LdltFactors {
                        partition: p.clone(),
                        l_blocks,
                        d_blocks,
                    },
                    failed_block: Some(k + 1),
                });
            }
        };
        for i in k + 1..nb {
            let mut s = blk(i, k);
            for j in 0..k {
                if let (Some(ldij), Some(lkj)) = (ld.get(&(i, j)), l_blocks.get(&(k, j))) {
                    s = s.sub(&ldij.matmul_t(lkj));
                }
            }
            if s.max_abs() == 0.0 {
                continue;
            }
            // L_ik = S D_k^{-1} = S R^{-1} R^{-T}
            let t = solve_triangular(&rk, Uplo::Upper, &s, Side::Right, Transpose::No)?;
            let lik = solve_triangular(&rk, Uplo::Upper, &t, Side::Right, Transpose::Yes)?;
            ld.insert((i, k), lik.matmul(&dk));
            l_blocks.insert((i, k), lik);
        }
    }
    Ok(PartialLdlt {
        factors: LdltFactors {
            partition: p.clone(),
            l_blocks,
            d_blocks,
        },
        failed_block: None,
    })
}
