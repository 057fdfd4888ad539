//! Reverse-mode differentiation over a linear tape of matrix operations.

use crate::activation::ActivationSpec;
use crate::backend::{self, Backend};
use crate::linalg::{self, LinalgError, Matrix, Side, Transpose, Uplo};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    TMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddIdentity(Var),
    Cholesky(Var),
    Solve {
        r: Var,
        b: Var,
        uplo: Uplo,
        side: Side,
        trans: Transpose,
    },
    AddRow(Var, Var),
    Activate(Var, ActivationSpec),
    SpectralFactor {
        w: Var,
        alpha: f64,
        sigma: f64,
        u: Vec<f64>,
        v: Vec<f64>,
    },
    ScaleBy(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Records operations in evaluation order.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when `v` does not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Back-propagates from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients, LinalgError> {
        assert_eq!(self.val(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::identity(1));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.matmul_t(self.val(*b)));
                    accumulate(&mut grads, *b, self.val(*a).t_matmul(&g));
                }
                Op::MatMulT(a, b) => {
                    accumulate(&mut grads, *a, g.matmul(self.val(*b)));
                    accumulate(&mut grads, *b, g.t_matmul(self.val(*a)));
                }
                Op::TMatMul(a, b) => {
                    accumulate(&mut grads, *a, self.val(*b).matmul_t(&g));
                    accumulate(&mut grads, *b, self.val(*a).matmul(&g));
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::AddIdentity(a) => accumulate(&mut grads, *a, g),
                Op::Cholesky(a) => {
                    let ga = cholesky_adjoint(&node.value, &g)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Solve {
                    r,
                    b,
                    uplo,
                    side,
                    trans,
                } => {
                    let (gr, gb) = solve_adjoint(self.val(*r), &node.value, &g, *uplo, *side, *trans)?;
                    accumulate(&mut grads, *r, gr);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(x, bias) => {
                    accumulate(&mut grads, *bias, Matrix::row_vector(&g.column_sums()));
                    accumulate(&mut grads, *x, g);
                }
                Op::Activate(x, act) => {
                    let gx = g.zip_with(self.val(*x), |gi, xi| gi * act.derivative(xi));
                    accumulate(&mut grads, *x, gx);
                }
                Op::SpectralFactor {
                    w,
                    alpha,
                    sigma,
                    u,
                    v,
                } => {
                    // d/dsigma sqrt(2a/(a+s^2)) = -sqrt(2a) s (a+s^2)^{-3/2}
                    let dc = -(2.0 * alpha).sqrt() * sigma * (alpha + sigma * sigma).powf(-1.5);
                    let k = g[(0, 0)] * dc;
                    let gw = Matrix::from_fn(u.len(), v.len(), |i, j| k * u[i] * v[j]);
                    accumulate(&mut grads, *w, gw);
                }
                Op::ScaleBy(x, s) => {
                    let sv = self.val(*s)[(0, 0)];
                    let gs = g.dot(self.val(*x));
                    accumulate(&mut grads, *x, g.scale(sv));
                    accumulate(&mut grads, *s, Matrix::from_raw(1, 1, vec![gs]));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let n = labels.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[(i, y)] -= 1.0;
                        let k = g[(0, 0)] * weights[y] / n;
                        gl.row_mut(i).iter_mut().for_each(|v| *v *= k);
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Adjoint of `R = chol(sym(A))` with `R` upper.
///
/// With `P = Phi(R Rbar^T)` (lower triangle, halved diagonal) and
/// `S = R^{-1} P R^{-T}`, the input adjoint is `(S + S^T) / 2`.
fn cholesky_adjoint(r: &Matrix, g: &Matrix) -> Result<Matrix, LinalgError> {
    let rbar = g.triangle(true);
    let mut p = r.matmul_t(&rbar).triangle(false);
    for i in 0..p.rows() {
        p[(i, i)] *= 0.5;
    }
    let t = linalg::solve_triangular(r, Uplo::Upper, &p, Side::Left, Transpose::No)?;
    let s = linalg::solve_triangular(r, Uplo::Upper, &t, Side::Right, Transpose::Yes)?;
    Ok(s.symmetrize())
}

fn flip(t: Transpose) -> Transpose {
    match t {
        Transpose::No => Transpose::Yes,
        Transpose::Yes => Transpose::No,
    }
}

fn solve_adjoint(
    r: &Matrix,
    x: &Matrix,
    g: &Matrix,
    uplo: Uplo,
    side: Side,
    trans: Transpose,
) -> Result<(Matrix, Matrix), LinalgError> {
    let (gb, gop) = match side {
        // op(r) X = b: bbar = op(r)^{-T} Xbar, op(r)bar = -bbar X^T
        Side::Left => {
            let gb = linalg::solve_triangular(r, uplo, g, Side::Left, flip(trans))?;
            let gop = gb.matmul_t(x).scale(-1.0);
            (gb, gop)
        }
        // X op(r) = b: bbar = Xbar op(r)^{-T}, op(r)bar = -X^T bbar
        Side::Right => {
            let gb = linalg::solve_triangular(r, uplo, g, Side::Right, flip(trans))?;
            let gop = x.t_matmul(&gb).scale(-1.0);
            (gb, gop)
        }
    };
    let gr = match trans {
        Transpose::No => gop,
        Transpose::Yes => gop.transpose(),
    };
    Ok((gr.triangle(uplo == Uplo::Upper), gb))
}

/// Top singular triplet `(sigma, u, v)` of `w`, via the eigensolver.
fn top_singular(w: &Matrix) -> (f64, Vec<f64>, Vec<f64>) {
    let (rows, cols) = w.shape();
    let gram = w.t_matmul(w);
    let eig = match linalg::sym_eig(&gram) {
        Ok(e) => e,
        Err(_) => return (linalg::spectral_norm(w), vec![0.0; rows], vec![0.0; cols]),
    };
    let lambda = eig.values.last().copied().unwrap_or(0.0).max(0.0);
    let sigma = lambda.sqrt();
    if sigma == 0.0 {
        return (0.0, vec![0.0; rows], vec![0.0; cols]);
    }
    let v: Vec<f64> = (0..cols).map(|i| eig.vectors[(i, cols - 1)]).collect();
    let u: Vec<f64> = w.matvec(&v).into_iter().map(|x| x / sigma).collect();
    (sigma, u, v)
}

impl Backend for Tape {
    type M = Var;

    fn constant(&mut self, m: Matrix) -> Var {
        self.leaf(m)
    }

    fn value<'a>(&'a self, x: &'a Var) -> &'a Matrix {
        self.val(*x)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).matmul(self.val(*b));
        self.push(v, Op::MatMul(*a, *b))
    }

    fn matmul_t(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).matmul_t(self.val(*b));
        self.push(v, Op::MatMulT(*a, *b))
    }

    fn t_matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).t_matmul(self.val(*b));
        self.push(v, Op::TMatMul(*a, *b))
    }

    fn transpose(&mut self, a: &Var) -> Var {
        let v = self.val(*a).transpose();
        self.push(v, Op::Transpose(*a))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).add(self.val(*b));
        self.push(v, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).sub(self.val(*b));
        self.push(v, Op::Sub(*a, *b))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(*a).scale(s);
        self.push(v, Op::Scale(*a, s))
    }

    fn add_identity(&mut self, a: &Var, s: f64) -> Var {
        let v = self.val(*a).add_identity(s);
        self.push(v, Op::AddIdentity(*a))
    }

    fn cholesky_upper(&mut self, a: &Var) -> Result<Var, LinalgError> {
        let v = linalg::cholesky_upper(self.val(*a))?;
        Ok(self.push(v, Op::Cholesky(*a)))
    }

    fn solve_triangular(
        &mut self,
        r: &Var,
        uplo: Uplo,
        b: &Var,
        side: Side,
        trans: Transpose,
    ) -> Result<Var, LinalgError> {
        let v = linalg::solve_triangular(self.val(*r), uplo, self.val(*b), side, trans)?;
        Ok(self.push(
            v,
            Op::Solve {
                r: *r,
                b: *b,
                uplo,
                side,
                trans,
            },
        ))
    }

    fn add_row(&mut self, x: &Var, bias: &Var) -> Var {
        let v = backend::add_row(self.val(*x), self.val(*bias));
        self.push(v, Op::AddRow(*x, *bias))
    }

    fn activate(&mut self, x: &Var, act: &ActivationSpec) -> Var {
        let v = self.val(*x).map(|e| act.apply(e));
        self.push(v, Op::Activate(*x, *act))
    }

    fn spectral_factor(&mut self, w: &Var, alpha: f64) -> Var {
        let (sigma, u, v) = top_singular(self.val(*w));
        let value = Matrix::from_raw(1, 1, vec![backend::spectral_factor_value(sigma, alpha)]);
        self.push(
            value,
            Op::SpectralFactor {
                w: *w,
                alpha,
                sigma,
                u,
                v,
            },
        )
    }

    fn scale_by(&mut self, x: &Var, s: &Var) -> Var {
        let v = self.val(*x).scale(self.val(*s)[(0, 0)]);
        self.push(v, Op::ScaleBy(*x, *s))
    }

    fn weighted_cross_entropy(&mut self, logits: &Var, labels: &[usize], weights: &[f64]) -> Var {
        let (loss, probs) = backend::cross_entropy_with_probs(self.val(*logits), labels, weights);
        self.push(
            Matrix::from_raw(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits: *logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    /// Central-difference check of `f` at `x` along every coordinate.
    fn check_grad(x: &Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(&mut tape, v);
        let g = tape.backward(out).unwrap().get_or_zeros(v, x.shape());
        let eval = |m: Matrix| {
            let mut t = Tape::new();
            let v = t.leaf(m);
            let o = build(&mut t, v);
            t.value(&o)[(0, 0)]
        };
        let h = 1e-6;
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut plus = x.clone();
                plus[(i, j)] += h;
                let mut minus = x.clone();
                minus[(i, j)] -= h;
                let fd = (eval(plus) - eval(minus)) / (2.0 * h);
                let an = g[(i, j)];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "({i},{j}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    /// `sum_ij x_ij p_ij`, written as `sum_k e_k^T (p^T x) e_k`.
    fn sum_weighted(tape: &mut Tape, x: Var, probe: &Matrix) -> Var {
        let p = tape.leaf(probe.clone());
        let ptx = tape.t_matmul(&p, &x);
        let mut acc: Option<Var> = None;
        for k in 0..probe.cols() {
            let e = tape.leaf(Matrix::from_fn(probe.cols(), 1, |i, _| if i == k { 1.0 } else { 0.0 }));
            let col = tape.matmul(&ptx, &e);
            let s = tape.t_matmul(&e, &col);
            acc = Some(match acc {
                Some(a) => tape.add(&a, &s),
                None => s,
            });
        }
        acc.unwrap()
    }

    #[test]
    fn cholesky_and_solve_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(4, 3, &mut rng);
        let probe = random(4, 3, &mut rng);
        check_grad(&w, |t, v| {
            let g = t.t_matmul(&v, &v);
            let a = t.add_identity(&g, 1.0);
            let r = t.cholesky_upper(&a).unwrap();
            let x = t.solve_triangular(&r, Uplo::Upper, &v, Side::Right, Transpose::No).unwrap();
            sum_weighted(t, x, &probe)
        });
    }

    #[test]
    fn solve_adjoint_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random(3, 3, &mut rng).triangle(true).add_identity(4.0);
        let b = random(3, 3, &mut rng);
        let probe = random(3, 3, &mut rng);
        for uplo in [Uplo::Upper, Uplo::Lower] {
            let r0 = if uplo == Uplo::Upper { base.clone() } else { base.transpose() };
            for side in [Side::Left, Side::Right] {
                for trans in [Transpose::No, Transpose::Yes] {
                    let bc = b.clone();
                    let pc = probe.clone();
                    check_grad(&r0, move |t, r| {
                        let bv = t.leaf(bc.clone());
                        let x = t.solve_triangular(&r, uplo, &bv, side, trans).unwrap();
                        sum_weighted(t, x, &pc)
                    });
                    let rc = r0.clone();
                    let pc = probe.clone();
                    check_grad(&b, move |t, bv| {
                        let r = t.leaf(rc.clone());
                        let x = t.solve_triangular(&r, uplo, &bv, side, trans).unwrap();
                        sum_weighted(t, x, &pc)
                    });
                }
            }
        }
    }

    #[test]
    fn activation_row_and_xent_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(4, 3, &mut rng);
        let w = random(3, 3, &mut rng);
        let act = crate::activation::builtin("tanh").unwrap();
        check_grad(&x, |t, v| {
            let wv = t.leaf(w.clone());
            let bias = t.leaf(Matrix::row_vector(&[0.1, -0.2, 0.3]));
            let z = t.matmul_t(&v, &wv);
            let z = t.add_row(&z, &bias);
            let h = t.activate(&z, &act);
            t.weighted_cross_entropy(&h, &[0, 2, 1, 2], &[1.0, 0.5, 2.0])
        });
        let bias0 = Matrix::row_vector(&[0.1, -0.2, 0.3]);
        check_grad(&bias0, |t, b| {
            let xv = t.leaf(x.clone());
            let z = t.add_row(&xv, &b);
            t.weighted_cross_entropy(&z, &[0, 2, 1, 2], &[1.0, 0.5, 2.0])
        });
    }

    #[test]
    fn spectral_factor_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(3, 4, &mut rng);
        let probe = random(2, 2, &mut rng);
        check_grad(&w, |t, v| {
            let c = t.spectral_factor(&v, 1.0);
            let p = t.leaf(probe.clone());
            let y = t.scale_by(&p, &c);
            let ones = t.leaf(Matrix::from_fn(2, 1, |_, _| 1.0));
            let s = t.matmul(&y, &ones);
            t.t_matmul(&ones, &s)
        });
    }
}
