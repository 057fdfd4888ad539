//! Reference computations for the integration and acceptance tests.
//!
//! Everything here is computed with nalgebra's dense routines so the checks
//! never reuse the crate's own factorizations.

#![allow(dead_code)]

use ldlt_core::activation;
use ldlt_core::linalg::Matrix;
use ldlt_core::param::{FeedforwardParams, ResidualAlphas, ResidualBlockParams};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Na = DMatrix<f64>;

pub fn na(m: &Matrix) -> Na {
    Na::from_row_slice(m.rows(), m.cols(), m.data())
}

pub fn from_na(m: &Na) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn inv(m: &Na) -> Na {
    m.clone().try_inverse().expect("invertible")
}

pub fn sym_eigs(m: &Na) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    let mut v: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn min_eig(m: &Na) -> f64 {
    sym_eigs(m)[0]
}

pub fn max_eig(m: &Na) -> f64 {
    *sym_eigs(m).last().unwrap()
}

pub fn spectral_norm(m: &Na) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Symmetric PSD square root `f(lambda) = sqrt(lambda)` applied spectrally.
pub fn sym_pow(m: &Na, p: f64) -> Na {
    let s = (m + m.transpose()) * 0.5;
    let e = s.symmetric_eigen();
    let d = Na::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).powf(p)));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Upper Cholesky factor `R` with `R^T R = m`.
pub fn chol_upper(m: &Na) -> Na {
    m.clone().cholesky().expect("positive definite").l().transpose()
}

pub fn rel(a: &Na, b: &Na) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random residual draw with `n` inner layers and dimensions in `1..=max_dim`.
pub fn random_residual<R: Rng>(rng: &mut R, n: usize, max_dim: usize, lipschitz: f64) -> ResidualBlockParams {
    let d0 = rng.random_range(1..=max_dim);
    let widths: Vec<usize> = (0..n).map(|_| rng.random_range(1..=max_dim)).collect();
    let scale = rng.random_range(0.3..2.0);
    let mut dims = vec![d0];
    dims.extend(&widths);
    let layers = (0..n).map(|j| gaussian(rng, dims[j + 1], dims[j], scale / (dims[j] as f64).sqrt())).collect();
    let alphas = ResidualAlphas {
        a: rng.random_range(0.5..2.0),
        b: rng.random_range(0.5..2.0),
        layers: (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    ResidualBlockParams {
        lipschitz,
        w_a: gaussian(rng, d0, d0, scale / (d0 as f64).sqrt()),
        w_b: gaussian(rng, d0, widths[n - 1], scale / (widths[n - 1] as f64).sqrt()),
        layers,
        biases: widths.iter().map(|&w| vec![0.0; w]).collect(),
        alphas,
        activation: activation::builtin("relu").unwrap(),
        b_variant: Default::default(),
    }
}

pub fn random_feedforward<R: Rng>(rng: &mut R, n: usize, max_dim: usize, lipschitz: f64) -> FeedforwardParams {
    let dims: Vec<usize> = (0..=n).map(|_| rng.random_range(1..=max_dim)).collect();
    let scale = rng.random_range(0.3..2.0);
    FeedforwardParams {
        lipschitz,
        layers: (0..n).map(|j| gaussian(rng, dims[j + 1], dims[j], scale / (dims[j] as f64).sqrt())).collect(),
        biases: dims[1..].iter().map(|&w| vec![0.0; w]).collect(),
        alphas: (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        activation: activation::builtin("relu").unwrap(),
    }
}

/// Negated Lipschitz LMI for `y = A x + B w_n`, `w_j = relu(C_j w_{j-1})`,
/// `Lambda = I`, built from the quadratic form
/// `L^2 |x|^2 - |Ax + B w_n|^2 + sum_j 2 w_j^T (C_j w_{j-1} - w_j)`.
pub fn lmi_oracle(lipschitz: f64, a: &Na, b: &Na, c: &[Na]) -> Na {
    let n = c.len();
    let mut sizes = vec![c[0].ncols()];
    sizes.extend(c.iter().map(|m| m.nrows()));
    let off: Vec<usize> = sizes.iter().scan(0, |acc, &s| {
        let o = *acc;
        *acc += s;
        Some(o)
    }).collect();
    let total: usize = sizes.iter().sum();
    let mut m = Na::zeros(total, total);
    m.view_mut((0, 0), (sizes[0], sizes[0]))
        .copy_from(&(Na::identity(sizes[0], sizes[0]) * lipschitz.powi(2)));
    for j in 1..=n {
        m.view_mut((off[j], off[j]), (sizes[j], sizes[j]))
            .copy_from(&(Na::identity(sizes[j], sizes[j]) * 2.0));
        let cj = &c[j - 1];
        let mut blk = m.view((off[j], off[j - 1]), (sizes[j], sizes[j - 1])).clone_owned();
        blk -= cj;
        m.view_mut((off[j], off[j - 1]), (sizes[j], sizes[j - 1])).copy_from(&blk);
        let mut blk_t = m.view((off[j - 1], off[j]), (sizes[j - 1], sizes[j])).clone_owned();
        blk_t -= cj.transpose();
        m.view_mut((off[j - 1], off[j]), (sizes[j - 1], sizes[j])).copy_from(&blk_t);
    }
    // -|F u|^2 with F = [A, 0, .., 0, B]
    let mut f = Na::zeros(a.nrows(), total);
    f.view_mut((0, 0), (a.nrows(), sizes[0])).copy_from(a);
    let mut fb = f.view((0, off[n]), (b.nrows(), sizes[n])).clone_owned();
    fb += b;
    f.view_mut((0, off[n]), (b.nrows(), sizes[n])).copy_from(&fb);
    m - f.transpose() * f
}

/// Pivot blocks by explicit Schur complements of leading principal blocks.
pub fn schur_pivots(m: &Na, sizes: &[usize]) -> Vec<Na> {
    let mut out = Vec::new();
    let mut start = 0;
    for &s in sizes {
        let mkk = m.view((start, start), (s, s)).clone_owned();
        if start == 0 {
            out.push(mkk);
        } else {
            let p = m.view((0, 0), (start, start)).clone_owned();
            let e = m.view((start, 0), (s, start)).clone_owned();
            out.push(&mkk - &e * inv(&p) * e.transpose());
        }
        start += s;
    }
    out
}

/// `Sigma = sum_j Gamma_j D_j^{-1} Gamma_j^T` with every `Gamma_j` formed as an
/// explicit product `prod_{k<j} D_k^{-1} C_k^T`.
pub fn brute_sigma(c: &[Na], d: &[Na]) -> Na {
    let n = c.len();
    let d0 = d[0].nrows();
    let mut sigma = Na::zeros(d0, d0);
    for j in 0..n {
        let mut gamma = Na::identity(d0, d0);
        for k in 0..j {
            gamma = gamma * inv(&d[k]) * c[k].transpose();
        }
        sigma += &gamma * inv(&d[j]) * gamma.transpose();
    }
    sigma
}

/// `A Sigma A^T` for the symmetric-root parameterization (all alphas 1),
/// together with the same expression after swapping every symmetric root
/// for a Cholesky factor.
///
/// Returns `(exact, shortcut, algorithm)` where `algorithm` evaluates the
/// symmetric-root network through the generic recursion.
pub fn sigma_shortcut_pair(lipschitz: f64, w_a: &Na, layers: &[Na]) -> (Na, Na, Na) {
    let n = layers.len();
    let l = lipschitz;
    let omega0 = Na::identity(w_a.ncols(), w_a.ncols()) + w_a.transpose() * w_a;
    let omegas: Vec<Na> = std::iter::once(omega0.clone())
        .chain(layers.iter().map(|w| Na::identity(w.nrows(), w.nrows()) + w * w.transpose()))
        .collect();
    let vs: Vec<Na> = layers
        .iter()
        .map(|w| Na::identity(w.ncols(), w.ncols()) + w.transpose() * w)
        .collect();

    // Symmetric-root network.
    let s_inv_half = |m: &Na| sym_pow(m, -0.5);
    let a = w_a * s_inv_half(&omega0) * l;
    let mut c = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for j in 0..n {
        let k = if j == 0 { 2f64.sqrt() * l } else { 2.0 };
        c.push(&layers[j] * s_inv_half(&vs[j]) * s_inv_half(&omegas[j]) * k);
        let cj = if j == 0 { l * l } else { 2.0 };
        d.push(inv(&omegas[j]) * cj);
    }
    let algorithm = &a * brute_sigma(&c, &d) * a.transpose();

    // Closed reduction: W_A W_A^T + W_A S_0^{-1} (sum_{j>=2} Xi_j Omega_{j-1} Xi_j^T) S_0^{-1} W_A^T.
    let xi = |root: &dyn Fn(&Na) -> Na, inv_root: &dyn Fn(&Na) -> Na, j: usize| -> Na {
        let mut x = Na::identity(w_a.ncols(), w_a.ncols());
        for k in 1..j {
            x = x * root(&omegas[k - 1]) * inv_root(&vs[k - 1]) * layers[k - 1].transpose();
        }
        x
    };
    let sym_root = |m: &Na| sym_pow(m, 0.5);
    let sym_inv_root = |m: &Na| sym_pow(m, -0.5);
    let chol_root = |m: &Na| chol_upper(m).transpose();
    let chol_inv_root = |m: &Na| inv(&chol_upper(m)).transpose();

    let reduce = |root: &dyn Fn(&Na) -> Na, inv_root: &dyn Fn(&Na) -> Na, right_inv: Na| -> Na {
        let mut inner = Na::zeros(w_a.ncols(), w_a.ncols());
        for j in 2..=n {
            let x = xi(root, inv_root, j);
            inner += &x * &omegas[j - 1] * x.transpose();
        }
        w_a * w_a.transpose() + w_a * &right_inv * inner * right_inv.transpose() * w_a.transpose()
    };
    let exact = reduce(&sym_root, &sym_inv_root, sym_pow(&omega0, -0.5));
    let shortcut = reduce(&chol_root, &chol_inv_root, inv(&chol_upper(&omega0)));
    (exact, shortcut, algorithm)
}

/// Relative error with an absolute floor for entries near zero.
pub fn fd_rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
