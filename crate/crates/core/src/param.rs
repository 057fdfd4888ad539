//! Constraint-satisfying weights from unconstrained raw parameters.
//!
//! Shapes: layer `j` maps `d_{j-1} -> d_j`, so raw `W_j` is `d_j x d_{j-1}`
//! with `d_0` the state dimension. Each raw matrix has two regularized
//! Grams: the input side `V_j = a_j I + W_j^T W_j` (used to normalize `W_j`)
//! and the output side `Omega_j = a_j I + W_j W_j^T` (which fixes the next
//! pivot block). For the residual block `Omega_0 = a_A I + W_A^T W_A`.
//!
//! Closed forms for the pivot blocks with slope bounds `(0, 1)`, `Lambda = I`:
//!
//! ```text
//! residual:    D_1 = L^2 a_A Omega_0^{-1},  D_j = 2 a_{j-1} Omega_{j-1}^{-1}
//!              D_{n+1} = 2 a_n Omega_n^{-1} - B^T Q B - B^T G - G^T B
//!              Q = I + A Sigma A^T,  G = A Gamma_{n+1}
//! feedforward: D_1 = L^2 I,  D_j = k_{j-1} a_{j-1} Omega_{j-1}^{-1},  D_{n+1} = a_n Omega_n^{-1}
//! ```
//!
//! where `k_j = 1` for the last layer and `2` otherwise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activation::{self, ActivationSpec};
use crate::backend::{Backend, Eager};
use crate::linalg::{self, LinalgError, Matrix, Side, Transpose, Uplo};
use crate::{Error, Result};

/// How the output matrix `B` of a residual block is normalized.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BVariant {
    /// Exact factor `chol(2 a_n Omega_n^{-1} + G^T Q^{-1} G)`.
    #[default]
    Tight,
    /// Scalar factor `sqrt(2 a_n / (a_n + ||W_n||_2^2))`.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualAlphas {
    pub a: f64,
    pub b: f64,
    pub layers: Vec<f64>,
}

impl ResidualAlphas {
    pub fn ones(depth: usize) -> Self {
        Self {
            a: 1.0,
            b: 1.0,
            layers: vec![1.0; depth],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockParams {
    pub lipschitz: f64,
    /// `d_0 x d_0`
    pub w_a: Matrix,
    /// `d_0 x d_n`
    pub w_b: Matrix,
    /// `W_j`, `d_j x d_{j-1}`
    pub layers: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub alphas: ResidualAlphas,
    pub activation: ActivationSpec,
    pub b_variant: BVariant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardParams {
    pub lipschitz: f64,
    /// `W_j`, `d_j x d_{j-1}`
    pub layers: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub activation: ActivationSpec,
}

/// Materialized residual block and the quantities of its LDL^T certificate.
#[derive(Debug, Clone)]
pub struct MaterializedBlock {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Vec<Matrix>,
    /// `D_1 .. D_{n+1}`
    pub d: Vec<Matrix>,
    pub sigma: Matrix,
    /// `Gamma_{n+1} = Gamma_n D_n^{-1} C_n^T`
    pub gamma_next: Matrix,
    /// Upper Cholesky factors of `Omega_0 .. Omega_n`.
    pub r_omega: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct MaterializedFeedforward {
    pub c: Vec<Matrix>,
    /// `D_1 .. D_{n+1}`
    pub d: Vec<Matrix>,
    /// Upper Cholesky factors of `Omega_1 .. Omega_n`.
    pub r_omega: Vec<Matrix>,
}

/// Draws a `rows x cols` matrix with entries `N(0, 1 / cols)`.
pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, (1.0 / cols.max(1) as f64).sqrt()).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} must be positive and finite, got {v}")))
    }
}

fn check_shape(name: &str, m: &Matrix, shape: (usize, usize)) -> Result<()> {
    if m.shape() == shape {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{name} is {:?}, expected {:?}",
            m.shape(),
            shape
        )))
    }
}

fn check_layers(layers: &[Matrix], biases: &[Vec<f64>], d0: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Validation("at least one inner layer is required".into()));
    }
    if biases.len() != layers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} biases for {} layers",
            biases.len(),
            layers.len()
        )));
    }
    let mut prev = d0;
    for (j, (w, b)) in layers.iter().zip(biases).enumerate() {
        if w.cols() != prev || w.rows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "layer {} is {:?}, expected {} columns",
                j + 1,
                w.shape(),
                prev
            )));
        }
        if b.len() != w.rows() {
            return Err(Error::DimensionMismatch(format!(
                "bias {} has length {}, expected {}",
                j + 1,
                b.len(),
                w.rows()
            )));
        }
        prev = w.rows();
    }
    Ok(())
}

impl ResidualBlockParams {
    /// Random raw weights with zero biases and unit alphas.
    pub fn random<R: Rng + ?Sized>(
        state_dim: usize,
        widths: &[usize],
        lipschitz: f64,
        activation: ActivationSpec,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = state_dim;
        for &w in widths {
            layers.push(init_matrix(w, prev, rng));
            prev = w;
        }
        Self {
            lipschitz,
            w_a: init_matrix(state_dim, state_dim, rng),
            w_b: init_matrix(state_dim, prev, rng),
            layers,
            biases: widths.iter().map(|&w| vec![0.0; w]).collect(),
            alphas: ResidualAlphas::ones(widths.len()),
            activation,
            b_variant: BVariant::Tight,
        }
    }

    /// All raw weights zero.
    pub fn zeros(state_dim: usize, widths: &[usize], lipschitz: f64) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = state_dim;
        for &w in widths {
            layers.push(Matrix::zeros(w, prev));
            prev = w;
        }
        Self {
            lipschitz,
            w_a: Matrix::zeros(state_dim, state_dim),
            w_b: Matrix::zeros(state_dim, prev),
            layers,
            biases: widths.iter().map(|&w| vec![0.0; w]).collect(),
            alphas: ResidualAlphas::ones(widths.len()),
            activation: activation::builtin("relu").expect("relu is built in"),
            b_variant: BVariant::Tight,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `d_0, d_1, .., d_n`
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.state_dim())
            .chain(self.layers.iter().map(|w| w.rows()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("lipschitz", self.lipschitz)?;
        let d0 = self.state_dim();
        check_shape("W_A", &self.w_a, (d0, d0))?;
        check_layers(&self.layers, &self.biases, d0)?;
        let dn = self.layers.last().map(|w| w.rows()).unwrap_or(0);
        check_shape("W_B", &self.w_b, (d0, dn))?;
        check_positive("alpha_A", self.alphas.a)?;
        check_positive("alpha_B", self.alphas.b)?;
        if self.alphas.layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} layer alphas for {} layers",
                self.alphas.layers.len(),
                self.layers.len()
            )));
        }
        for (j, a) in self.alphas.layers.iter().enumerate() {
            check_positive(&format!("alpha_{}", j + 1), *a)?;
        }
        self.activation.require_unit_slopes()
    }
}

impl FeedforwardParams {
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        lipschitz: f64,
        activation: ActivationSpec,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            layers.push(init_matrix(w, prev, rng));
            prev = w;
        }
        Self {
            lipschitz,
            layers,
            biases: widths.iter().map(|&w| vec![0.0; w]).collect(),
            alphas: vec![1.0; widths.len()],
            activation,
        }
    }

    pub fn zeros(input_dim: usize, widths: &[usize], lipschitz: f64) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            layers.push(Matrix::zeros(w, prev));
            prev = w;
        }
        Self {
            lipschitz,
            layers,
            biases: widths.iter().map(|&w| vec![0.0; w]).collect(),
            alphas: vec![1.0; widths.len()],
            activation: activation::builtin("relu").expect("relu is built in"),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|w| w.cols()).unwrap_or(0)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|w| w.rows()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("lipschitz", self.lipschitz)?;
        check_layers(&self.layers, &self.biases, self.input_dim())?;
        if self.alphas.len() != self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} alphas for {} layers",
                self.alphas.len(),
                self.layers.len()
            )));
        }
        for (j, a) in self.alphas.iter().enumerate() {
            check_positive(&format!("alpha_{}", j + 1), *a)?;
        }
        self.activation.require_unit_slopes()
    }
}

// ---------------------------------------------------------------------------
// Backend-generic construction, shared by evaluation and gradient code.

/// `alpha I + W^T W`
pub fn input_gram<B: Backend>(be: &mut B, w: &B::M, alpha: f64) -> B::M {
    let g = be.t_matmul(w, w);
    be.add_identity(&g, alpha)
}

/// `alpha I + W W^T`
pub fn output_gram<B: Backend>(be: &mut B, w: &B::M, alpha: f64) -> B::M {
    let g = be.matmul_t(w, w);
    be.add_identity(&g, alpha)
}

/// `gamma W R^{-1}` with `R^T R = alpha I + W^T W`.
pub fn normalized_map_with<B: Backend>(
    be: &mut B,
    w: &B::M,
    gamma: f64,
    alpha: f64,
) -> Result<B::M, LinalgError> {
    let v = input_gram(be, w, alpha);
    let r = be.cholesky_upper(&v)?;
    let x = be.solve_triangular(&r, Uplo::Upper, w, Side::Right, Transpose::No)?;
    Ok(be.scale(&x, gamma))
}

/// `gamma R^{-T} W` with `R^T R = alpha I + W W^T`.
///
/// Same spectral norm as [`normalized_map_with`], but `(gamma R^{-T} W)^T (gamma R^{-T} W)
/// = gamma^2 (I - alpha (alpha I + W^T W)^{-1})`, so the complement
/// `gamma^2 I - A^T A` is the input-side Gram inverse up to scale.
pub fn left_normalized_map_with<B: Backend>(
    be: &mut B,
    w: &B::M,
    gamma: f64,
    alpha: f64,
) -> Result<B::M, LinalgError> {
    let o = output_gram(be, w, alpha);
    let r = be.cholesky_upper(&o)?;
    let x = be.solve_triangular(&r, Uplo::Upper, w, Side::Left, Transpose::Yes)?;
    Ok(be.scale(&x, gamma))
}

/// `k W R_V^{-1} R_prev^{-T}`, the shape shared by every inner layer map.
fn chained_map<B: Backend>(
    be: &mut B,
    w: &B::M,
    alpha: f64,
    r_prev: Option<&B::M>,
    k: f64,
) -> Result<B::M, LinalgError> {
    let v = input_gram(be, w, alpha);
    let rv = be.cholesky_upper(&v)?;
    let mut x = be.solve_triangular(&rv, Uplo::Upper, w, Side::Right, Transpose::No)?;
    if let Some(rp) = r_prev {
        x = be.solve_triangular(rp, Uplo::Upper, &x, Side::Right, Transpose::Yes)?;
    }
    Ok(be.scale(&x, k))
}

/// Materialized residual weights plus the intermediates needed downstream.
#[derive(Debug, Clone)]
pub struct ResidualCore<T> {
    pub a: T,
    pub b: T,
    pub c: Vec<T>,
    /// `Omega_0 .. Omega_n`
    pub omega: Vec<T>,
    pub r_omega: Vec<T>,
    pub sigma: T,
    /// `Gamma_{n+1}`
    pub gamma_next: T,
    /// `G = A Gamma_{n+1}`, the coupling of the state into the last pivot.
    pub coupling: T,
}

/// Builds `A`, `C_1..C_n`, `Sigma` and `B` for one residual block.
pub fn residual_core<B: Backend>(
    be: &mut B,
    lipschitz: f64,
    w_a: &B::M,
    w_b: &B::M,
    layers: &[B::M],
    alphas: &ResidualAlphas,
    variant: BVariant,
) -> Result<ResidualCore<B::M>, LinalgError> {
    let n = layers.len();
    let l = lipschitz;
    let a = left_normalized_map_with(be, w_a, l, alphas.a)?;
    let omega0 = input_gram(be, w_a, alphas.a);
    let r0 = be.cholesky_upper(&omega0)?;

    let mut omega = vec![omega0];
    let mut r_omega = vec![r0];
    let mut c = Vec::with_capacity(n);
    for (j, w) in layers.iter().enumerate() {
        let k = if j == 0 {
            (2.0 * alphas.a).sqrt() * l
        } else {
            2.0 * alphas.layers[j - 1].sqrt()
        };
        let cj = chained_map(be, w, alphas.layers[j], Some(&r_omega[j]), k)?;
        c.push(cj);
        let om = output_gram(be, w, alphas.layers[j]);
        let rom = be.cholesky_upper(&om)?;
        omega.push(om);
        r_omega.push(rom);
    }

    // Sigma = sum_j Gamma_j D_j^{-1} Gamma_j^T with Gamma_1 = I and
    // Gamma_{j+1} = Gamma_j D_j^{-1} C_j^T, where D_j^{-1} = Omega_{j-1} / c_j.
    let d0 = be.value(w_a).rows();
    let mut gamma: Option<B::M> = None;
    let mut sigma: Option<B::M> = None;
    for j in 0..n {
        let cj = if j == 0 { l * l * alphas.a } else { 2.0 * alphas.layers[j - 1] };
        let t = match &gamma {
            None => be.scale(&omega[0], 1.0 / cj),
            Some(g) => {
                let gm = be.matmul(g, &omega[j]);
                be.scale(&gm, 1.0 / cj)
            }
        };
        let term = match &gamma {
            None => t.clone(),
            Some(g) => be.matmul_t(&t, g),
        };
        sigma = Some(match sigma {
            None => term,
            Some(s) => be.add(&s, &term),
        });
        gamma = Some(be.matmul_t(&t, &c[j]));
    }
    let sigma = sigma.unwrap_or_else(|| be.constant(Matrix::zeros(d0, d0)));

    let gamma_next = gamma.expect("at least one inner layer");
    let coupling = be.matmul(&a, &gamma_next);

    // Q = I + A Sigma A^T. The last pivot is
    // D_{n+1} = 2 a_n Omega_n^{-1} - B^T Q B - B^T G - G^T B with G = A Gamma_{n+1},
    // so B = R_Q^{-1} N F - Q^{-1} G for a contraction N and F^T F <= T,
    // T = 2 a_n Omega_n^{-1} + G^T Q^{-1} G, gives D_{n+1} = F^T (I - N^T N) F + (T - F^T F).
    let a_sigma = be.matmul(&a, &sigma);
    let a_sigma_at = be.matmul_t(&a_sigma, &a);
    let q = be.add_identity(&a_sigma_at, 1.0);
    let r_q = be.cholesky_upper(&q)?;
    let z = be.solve_triangular(&r_q, Uplo::Upper, &coupling, Side::Left, Transpose::Yes)?;
    let shift = be.solve_triangular(&r_q, Uplo::Upper, &z, Side::Left, Transpose::No)?;
    let alpha_n = alphas.layers[n - 1];
    let vb = input_gram(be, w_b, alphas.b);
    let r_vb = be.cholesky_upper(&vb)?;
    let contraction = be.solve_triangular(&r_vb, Uplo::Upper, w_b, Side::Right, Transpose::No)?;
    let nf = match variant {
        BVariant::Tight => {
            let dn = be.value(&r_omega[n]).rows();
            let eye = be.constant(Matrix::identity(dn));
            let x = be.solve_triangular(&r_omega[n], Uplo::Upper, &eye, Side::Left, Transpose::Yes)?;
            let omega_inv = be.t_matmul(&x, &x);
            let omega_inv = be.scale(&omega_inv, 2.0 * alpha_n);
            let ztz = be.t_matmul(&z, &z);
            let t = be.add(&omega_inv, &ztz);
            let r_t = be.cholesky_upper(&t)?;
            be.matmul(&contraction, &r_t)
        }
        BVariant::Scalar => {
            let factor = be.spectral_factor(&layers[n - 1], alpha_n);
            be.scale_by(&contraction, &factor)
        }
    };
    let lifted = be.solve_triangular(&r_q, Uplo::Upper, &nf, Side::Left, Transpose::No)?;
    let b = be.sub(&lifted, &shift);
    Ok(ResidualCore {
        a,
        b,
        c,
        omega,
        r_omega,
        sigma,
        gamma_next,
        coupling,
    })
}

#[derive(Debug, Clone)]
pub struct FeedforwardCore<T> {
    pub c: Vec<T>,
    /// `Omega_1 .. Omega_n`
    pub omega: Vec<T>,
    pub r_omega: Vec<T>,
}

/// Slope weight of feedforward layer `j` (0-based) out of `n`.
pub fn feedforward_kappa(j: usize, n: usize) -> f64 {
    if j + 1 == n {
        1.0
    } else {
        2.0
    }
}

/// Builds `C_1..C_n` for a feedforward stack.
pub fn feedforward_core<B: Backend>(
    be: &mut B,
    lipschitz: f64,
    layers: &[B::M],
    alphas: &[f64],
) -> Result<FeedforwardCore<B::M>, LinalgError> {
    let n = layers.len();
    let mut c = Vec::with_capacity(n);
    let mut omega: Vec<B::M> = Vec::with_capacity(n);
    let mut r_omega: Vec<B::M> = Vec::with_capacity(n);
    for (j, w) in layers.iter().enumerate() {
        let kappa = feedforward_kappa(j, n);
        let cj = if j == 0 {
            chained_map(be, w, alphas[0], None, kappa.sqrt() * lipschitz)?
        } else {
            let k = (kappa * feedforward_kappa(j - 1, n) * alphas[j - 1]).sqrt();
            chained_map(be, w, alphas[j], Some(&r_omega[j - 1]), k)?
        };
        c.push(cj);
        let om = output_gram(be, w, alphas[j]);
        let rom = be.cholesky_upper(&om)?;
        omega.push(om);
        r_omega.push(rom);
    }
    Ok(FeedforwardCore { c, omega, r_omega })
}

// ---------------------------------------------------------------------------
// Eager operations.

/// `gamma W R^{-1}` with `R = chol(alpha I + W^T W)`; its spectral norm is
/// `gamma s / sqrt(alpha + s^2)` for `s = ||W||_2`.
pub fn normalized_map(w: &Matrix, gamma: f64, alpha: f64) -> Result<Matrix> {
    check_positive("gamma", gamma)?;
    check_positive("alpha", alpha)?;
    Ok(normalized_map_with(&mut Eager, w, gamma, alpha)?)
}

/// `c R^{-1} R^{-T}` for upper `R`, i.e. `c (R^T R)^{-1}` by two triangular solves.
pub fn scaled_inverse_from_factor(r: &Matrix, c: f64) -> Result<Matrix> {
    let n = r.rows();
    let rinv = linalg::solve_triangular(r, Uplo::Upper, &Matrix::identity(n), Side::Left, Transpose::No)?;
    Ok(rinv.matmul_t(&rinv).scale(c).symmetrize())
}

/// `A = L R^{-T} W_A` with `R^T R = a_A I + W_A W_A^T`; `||A||_2 < L`.
pub fn materialize_a(p: &ResidualBlockParams) -> Result<Matrix> {
    p.validate()?;
    Ok(left_normalized_map_with(&mut Eager, &p.w_a, p.lipschitz, p.alphas.a)?)
}

/// `D_1 = L^2 a_A (a_A I + W_A^T W_A)^{-1}`, which equals `L^2 I - A^T A`.
pub fn compute_d1(p: &ResidualBlockParams) -> Result<Matrix> {
    p.validate()?;
    let r = linalg::cholesky_upper(&input_gram(&mut Eager, &p.w_a, p.alphas.a))?;
    scaled_inverse_from_factor(&r, p.lipschitz * p.lipschitz * p.alphas.a)
}

/// `D_j = 2 a_{j-1} (a_{j-1} I + W_{j-1} W_{j-1}^T)^{-1}` for `2 <= j <= n`.
pub fn compute_dj(p: &ResidualBlockParams, j: usize) -> Result<Matrix> {
    p.validate()?;
    if j < 2 || j > p.depth() {
        return Err(Error::Validation(format!("D_{j} is defined for 2 <= j <= {}", p.depth())));
    }
    let alpha = p.alphas.layers[j - 2];
    let r = linalg::cholesky_upper(&output_gram(&mut Eager, &p.layers[j - 2], alpha))?;
    scaled_inverse_from_factor(&r, 2.0 * alpha)
}

/// `C_j` for `1 <= j <= n`.
pub fn materialize_cj(p: &ResidualBlockParams, j: usize) -> Result<Matrix> {
    p.validate()?;
    if j < 1 || j > p.depth() {
        return Err(Error::Validation(format!("C_{j} is defined for 1 <= j <= {}", p.depth())));
    }
    let (prev_gram, k) = if j == 1 {
        (
            input_gram(&mut Eager, &p.w_a, p.alphas.a),
            (2.0 * p.alphas.a).sqrt() * p.lipschitz,
        )
    } else {
        let a = p.alphas.layers[j - 2];
        (output_gram(&mut Eager, &p.layers[j - 2], a), 2.0 * a.sqrt())
    };
    let r_prev = linalg::cholesky_upper(&prev_gram)?;
    Ok(chained_map(&mut Eager, &p.layers[j - 1], p.alphas.layers[j - 1], Some(&r_prev), k)?)
}

/// `Sigma = sum_j Gamma_j D_j^{-1} Gamma_j^T`, `Gamma_1 = I`,
/// `Gamma_{j+1} = Gamma_j D_j^{-1} C_j^T`, for arbitrary PD pivots `D_j`.
pub fn compute_sigma(c: &[Matrix], d: &[Matrix]) -> Result<Matrix> {
    Ok(sigma_and_gamma(c, d)?.0)
}

/// `Sigma` together with `Gamma_{n+1}`.
pub fn sigma_and_gamma(c: &[Matrix], d: &[Matrix]) -> Result<(Matrix, Matrix)> {
    if c.is_empty() || d.len() < c.len() {
        return Err(Error::DimensionMismatch(format!(
            "need D_1..D_n for {} layers, got {}",
            c.len(),
            d.len()
        )));
    }
    let d0 = d[0].rows();
    let mut gamma = Matrix::identity(d0);
    let mut sigma = Matrix::zeros(d0, d0);
    for (cj, dj) in c.iter().zip(d) {
        if dj.rows() != gamma.cols() || cj.cols() != dj.rows() {
            return Err(Error::DimensionMismatch("C_j / D_j sizes do not chain".into()));
        }
        let r = linalg::cholesky_upper(dj)?;
        // T = Gamma D^{-1} = (Gamma R^{-1}) R^{-T}
        let t = linalg::solve_triangular(&r, Uplo::Upper, &gamma, Side::Right, Transpose::No)?;
        let t = linalg::solve_triangular(&r, Uplo::Upper, &t, Side::Right, Transpose::Yes)?;
        sigma.add_assign(&t.matmul_t(&gamma));
        gamma = t.matmul_t(cj);
    }
    Ok((sigma.symmetrize(), gamma))
}

/// `B` from `A`, `Sigma` and `Gamma_{n+1}` under the parameter set's variant.
pub fn materialize_b(p: &ResidualBlockParams, a: &Matrix, sigma: &Matrix, gamma_next: &Matrix) -> Result<Matrix> {
    p.validate()?;
    let n = p.depth();
    let q = a.matmul(sigma).matmul_t(a).add_identity(1.0);
    let r_q = linalg::cholesky_upper(&q)?;
    let g = a.matmul(gamma_next);
    let z = linalg::solve_triangular(&r_q, Uplo::Upper, &g, Side::Left, Transpose::Yes)?;
    let shift = linalg::solve_triangular(&r_q, Uplo::Upper, &z, Side::Left, Transpose::No)?;
    let r_vb = linalg::cholesky_upper(&input_gram(&mut Eager, &p.w_b, p.alphas.b))?;
    let contraction = linalg::solve_triangular(&r_vb, Uplo::Upper, &p.w_b, Side::Right, Transpose::No)?;
    let alpha_n = p.alphas.layers[n - 1];
    let nf = match p.b_variant {
        BVariant::Tight => {
            let r_on = linalg::cholesky_upper(&output_gram(&mut Eager, &p.layers[n - 1], alpha_n))?;
            let t = scaled_inverse_from_factor(&r_on, 2.0 * alpha_n)?.add(&z.t_matmul(&z));
            contraction.matmul(&linalg::cholesky_upper(&t)?)
        }
        BVariant::Scalar => contraction.scale(Eager.spectral_factor(&p.layers[n - 1], alpha_n)[(0, 0)]),
    };
    Ok(linalg::solve_triangular(&r_q, Uplo::Upper, &nf, Side::Left, Transpose::No)?.sub(&shift))
}

/// `D_{n+1} = 2 a_n Omega_n^{-1} - B^T Q B - B^T G - G^T B`.
pub fn compute_dn1(p: &ResidualBlockParams, a: &Matrix, b: &Matrix, sigma: &Matrix, gamma_next: &Matrix) -> Result<Matrix> {
    p.validate()?;
    let n = p.depth();
    let alpha_n = p.alphas.layers[n - 1];
    let r_on = linalg::cholesky_upper(&output_gram(&mut Eager, &p.layers[n - 1], alpha_n))?;
    let base = scaled_inverse_from_factor(&r_on, 2.0 * alpha_n)?;
    Ok(last_pivot(&base, a, b, sigma, gamma_next))
}

fn last_pivot(base: &Matrix, a: &Matrix, b: &Matrix, sigma: &Matrix, gamma_next: &Matrix) -> Matrix {
    let q = a.matmul(sigma).matmul_t(a).add_identity(1.0);
    let btg = b.t_matmul(&a.matmul(gamma_next));
    base.sub(&b.t_matmul(&q.matmul(b)))
        .sub(&btg)
        .sub(&btg.transpose())
        .symmetrize()
}

pub fn materialize_residual(p: &ResidualBlockParams) -> Result<MaterializedBlock> {
    p.validate()?;
    let core = residual_core(
        &mut Eager,
        p.lipschitz,
        &p.w_a,
        &p.w_b,
        &p.layers,
        &p.alphas,
        p.b_variant,
    )?;
    let n = p.depth();
    let l2 = p.lipschitz * p.lipschitz;
    let mut d = Vec::with_capacity(n + 1);
    d.push(scaled_inverse_from_factor(&core.r_omega[0], l2 * p.alphas.a)?);
    for j in 1..n {
        d.push(scaled_inverse_from_factor(&core.r_omega[j], 2.0 * p.alphas.layers[j - 1])?);
    }
    let base = scaled_inverse_from_factor(&core.r_omega[n], 2.0 * p.alphas.layers[n - 1])?;
    d.push(last_pivot(&base, &core.a, &core.b, &core.sigma, &core.gamma_next));
    Ok(MaterializedBlock {
        a: core.a,
        b: core.b,
        c: core.c,
        d,
        sigma: core.sigma.symmetrize(),
        gamma_next: core.gamma_next,
        r_omega: core.r_omega,
    })
}

pub fn materialize_feedforward(p: &FeedforwardParams) -> Result<MaterializedFeedforward> {
    p.validate()?;
    let core = feedforward_core(&mut Eager, p.lipschitz, &p.layers, &p.alphas)?;
    let n = p.depth();
    let d0 = p.input_dim();
    let mut d = Vec::with_capacity(n + 1);
    d.push(Matrix::scaled_identity(d0, p.lipschitz * p.lipschitz));
    for j in 0..n {
        let k = feedforward_kappa(j, n) * p.alphas[j];
        d.push(scaled_inverse_from_factor(&core.r_omega[j], k)?);
    }
    Ok(MaterializedFeedforward {
        c: core.c,
        d,
        r_omega: core.r_omega,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn relu() -> ActivationSpec {
        activation::builtin("relu").unwrap()
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn normalized_map_examples() {
        let z = normalized_map(&Matrix::zeros(3, 2), 5.0, 1.0).unwrap();
        assert_eq!(z, Matrix::zeros(3, 2));
        let one = normalized_map(&Matrix::from_rows(&[[1.0]]), 1.0, 1.0).unwrap();
        assert!((one[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(normalized_map(&Matrix::identity(2), 1.0, 0.0).is_err());
    }

    #[test]
    fn materialize_a_examples() {
        let mut p = ResidualBlockParams::zeros(2, &[2], 1.0);
        assert_eq!(materialize_a(&p).unwrap(), Matrix::zeros(2, 2));
        p.w_a = Matrix::identity(2);
        let a = materialize_a(&p).unwrap();
        assert!(a.sub(&Matrix::scaled_identity(2, 0.5f64.sqrt())).max_abs() < 1e-15);
    }

    #[test]
    fn d1_examples() {
        let p = ResidualBlockParams::zeros(3, &[2], 2.0);
        let d1 = compute_d1(&p).unwrap();
        assert!(d1.sub(&Matrix::scaled_identity(3, 4.0)).max_abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ResidualBlockParams::random(4, &[3, 5], 1.5, relu(), &mut rng);
        let a = materialize_a(&p).unwrap();
        let direct = Matrix::scaled_identity(4, 2.25).sub(&a.t_matmul(&a));
        let got = compute_d1(&p).unwrap();
        assert!(rel(&got, &direct) < 1e-10, "{got:?} {direct:?}");
    }

    #[test]
    fn dj_matches_schur_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ResidualBlockParams::random(3, &[4, 2, 5], 1.0, relu(), &mut rng);
        let m = materialize_residual(&p).unwrap();
        for j in 2..=3 {
            let c = &m.c[j - 2];
            let d_prev = &m.d[j - 2];
            let r = linalg::cholesky_upper(d_prev).unwrap();
            let x = linalg::solve_triangular(&r, Uplo::Upper, &c.transpose(), Side::Left, Transpose::Yes).unwrap();
            let schur = Matrix::scaled_identity(c.rows(), 2.0).sub(&x.t_matmul(&x));
            assert!(rel(&compute_dj(&p, j).unwrap(), &schur) < 1e-9, "j={j}");
        }
        let z = ResidualBlockParams::zeros(2, &[3, 3], 1.0);
        assert!(compute_dj(&z, 2).unwrap().sub(&Matrix::scaled_identity(3, 2.0)).max_abs() < 1e-14);
        assert!(compute_dj(&z, 1).is_err());
    }

    #[test]
    fn cj_matches_materialized_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ResidualBlockParams::random(3, &[4, 2], 0.5, relu(), &mut rng);
        let m = materialize_residual(&p).unwrap();
        for j in 1..=2 {
            assert!(rel(&materialize_cj(&p, j).unwrap(), &m.c[j - 1]) < 1e-14);
        }
        let z = ResidualBlockParams::zeros(2, &[3], 1.0);
        assert_eq!(materialize_cj(&z, 1).unwrap(), Matrix::zeros(3, 2));
    }

    #[test]
    fn sigma_general_matches_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = ResidualBlockParams::random(3, &[4, 2, 3], 1.0, relu(), &mut rng);
        let m = materialize_residual(&p).unwrap();
        let s = compute_sigma(&m.c, &m.d[..3]).unwrap();
        assert!(rel(&s, &m.sigma) < 1e-12);
        // n = 1: Sigma = D_1^{-1}
        let p1 = ResidualBlockParams::random(3, &[2], 1.0, relu(), &mut rng);
        let m1 = materialize_residual(&p1).unwrap();
        let r = linalg::cholesky_upper(&m1.d[0]).unwrap();
        assert!(rel(&m1.sigma, &scaled_inverse_from_factor(&r, 1.0).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_weights_sigma_telescopes() {
        // D_1 = I, D_j = 2I, C = 0, so only the Gamma_1 term survives.
        let p = ResidualBlockParams::zeros(2, &[2, 2, 2], 1.0);
        let m = materialize_residual(&p).unwrap();
        assert!(m.sigma.sub(&Matrix::identity(2)).max_abs() < 1e-15);
        assert_eq!(m.a, Matrix::zeros(2, 2));
        assert_eq!(m.b, Matrix::zeros(2, 2));
        assert!(m.c.iter().all(|c| c.max_abs() == 0.0));
    }

    #[test]
    fn scalar_zero_case() {
        let p = ResidualBlockParams::zeros(1, &[1], 1.0);
        let m = materialize_residual(&p).unwrap();
        assert_eq!(m.b[(0, 0)], 0.0);
        assert!((m.d[1][(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn b_individual_op_matches_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for variant in [BVariant::Tight, BVariant::Scalar] {
            let mut p = ResidualBlockParams::random(3, &[4, 2], 1.0, relu(), &mut rng);
            p.b_variant = variant;
            let m = materialize_residual(&p).unwrap();
            let b = materialize_b(&p, &m.a, &m.sigma, &m.gamma_next).unwrap();
            assert!(rel(&b, &m.b) < 1e-12);
            let dn1 = compute_dn1(&p, &m.a, &m.b, &m.sigma, &m.gamma_next).unwrap();
            assert!(rel(&dn1, &m.d[2]) < 1e-12);
            assert!(linalg::min_eigenvalue(&dn1).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn feedforward_scalar_hand_values() {
        let mut p = FeedforwardParams::zeros(1, &[1, 1], 1.0);
        p.layers = vec![Matrix::from_rows(&[[1.0]]), Matrix::from_rows(&[[1.0]])];
        let m = materialize_feedforward(&p).unwrap();
        // C_1 = sqrt(2) * 1/sqrt(2) = 1; C_2 = sqrt(2) * (1/sqrt(2)) * (1/sqrt(2))
        assert!((m.c[0][(0, 0)] - 1.0).abs() < 1e-15);
        assert!((m.c[1][(0, 0)] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((m.d[1][(0, 0)] - 1.0).abs() < 1e-15);
        assert!((m.d[2][(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn feedforward_zero_weights() {
        let p = FeedforwardParams::zeros(3, &[2, 4], 1.0);
        let m = materialize_feedforward(&p).unwrap();
        assert!(m.c.iter().all(|c| c.max_abs() == 0.0));
        assert!(m.d[2].sub(&Matrix::identity(4)).max_abs() < 1e-15);
    }

    #[test]
    fn validation_errors() {
        let mut p = ResidualBlockParams::zeros(2, &[2], 1.0);
        p.layers.clear();
        p.biases.clear();
        p.alphas.layers.clear();
        assert!(matches!(p.validate(), Err(Error::Validation(_))));
        let mut p = ResidualBlockParams::zeros(2, &[2], 1.0);
        p.w_b = Matrix::zeros(2, 3);
        assert!(matches!(p.validate(), Err(Error::DimensionMismatch(_))));
        let mut p = ResidualBlockParams::zeros(2, &[2], 1.0);
        p.activation = activation::builtin("leaky_relu").unwrap();
        assert!(p.validate().is_err());
        let mut p = ResidualBlockParams::zeros(2, &[2], 1.0);
        p.alphas.a = 0.0;
        assert!(p.validate().is_err());
    }
}
