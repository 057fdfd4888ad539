//! Deep models: input projection, Lipschitz-parameterized blocks, linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::{self, ActivationSpec};
use crate::backend::{Backend, Eager};
use crate::linalg::{self, LinalgError, Matrix};
use crate::lmi::{self, Certificate, LmiProblem};
use crate::param::{self, BVariant, FeedforwardParams, ResidualBlockParams};
use crate::par::{self, Execution};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Residual,
    Feedforward,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Residual => "residual",
            ModelKind::Feedforward => "feedforward",
        }
    }

    /// Short algorithm label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Residual => "LDLT-R",
            ModelKind::Feedforward => "LDLT-L",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "residual" | "ldlt-r" => Ok(ModelKind::Residual),
            "feedforward" | "ldlt-l" => Ok(ModelKind::Feedforward),
            _ => Err(Error::Validation(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// State dimension and width of every inner layer.
    pub width: usize,
    /// Inner layers per block.
    pub depth: usize,
    /// End-to-end Lipschitz bound.
    pub lipschitz: f64,
    pub activation: String,
    pub seed: u64,
    /// Number of stacked blocks, each with budget `lipschitz^(1/blocks)`.
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default)]
    pub b_variant: BVariant,
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn new(kind: ModelKind, input_dim: usize, output_dim: usize, width: usize, depth: usize) -> Self {
        Self {
            kind,
            input_dim,
            output_dim,
            width,
            depth,
            lipschitz: 1.0,
            activation: "relu".into(),
            seed: 0,
            blocks: 1,
            b_variant: BVariant::Tight,
        }
    }

    pub fn validate(&self) -> Result<ActivationSpec> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
            ("width", self.width),
            ("depth", self.depth),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be at least 1")));
            }
        }
        if !(self.lipschitz.is_finite() && self.lipschitz > 0.0) {
            return Err(Error::Validation(format!("lipschitz must be positive, got {}", self.lipschitz)));
        }
        let act = activation::builtin(&self.activation)?;
        act.require_unit_slopes()?;
        Ok(act)
    }

    pub fn block_lipschitz(&self) -> f64 {
        self.lipschitz.powf(1.0 / self.blocks as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams {
    Residual(ResidualBlockParams),
    Feedforward(FeedforwardParams),
}

/// Weights ready for evaluation, generic over the backend's matrix handle.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    /// `width x input_dim`
    pub proj: T,
    /// `1 x width`
    pub proj_bias: T,
    pub blocks: Vec<BlockWeights<T>>,
    /// `output_dim x width`
    pub head: T,
    /// `1 x output_dim`
    pub head_bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    /// Present for residual blocks only.
    pub a: Option<T>,
    pub b: Option<T>,
    pub c: Vec<T>,
    /// `1 x d_j` rows.
    pub biases: Vec<T>,
}

/// A named raw parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct ParamRef<'a> {
    pub name: &'a str,
    pub shape: (usize, usize),
    pub data: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub activation: ActivationSpec,
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
    names: Vec<String>,
    weights: ModelWeights<Matrix>,
}

impl Model {
    /// Random initialization: weights `N(0, 1/fan_in)`, biases zero.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let act = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let w = spec.width;
        let proj_w = param::init_matrix(w, spec.input_dim, &mut rng);
        let lb = spec.block_lipschitz();
        let widths = vec![w; spec.depth];
        let blocks = (0..spec.blocks)
            .map(|_| match spec.kind {
                ModelKind::Residual => {
                    let mut p = ResidualBlockParams::random(w, &widths, lb, act, &mut rng);
                    p.b_variant = spec.b_variant;
                    BlockParams::Residual(p)
                }
                ModelKind::Feedforward => {
                    BlockParams::Feedforward(FeedforwardParams::random(w, &widths, lb, act, &mut rng))
                }
            })
            .collect();
        let head_w = param::init_matrix(spec.output_dim, w, &mut rng);
        let head_b = vec![0.0; spec.output_dim];
        Self::from_parts(spec, proj_w, vec![0.0; w], blocks, head_w, head_b)
    }

    /// Assembles a model from raw parameters and materializes it.
    pub fn from_parts(
        spec: ModelSpec,
        proj_w: Matrix,
        proj_b: Vec<f64>,
        blocks: Vec<BlockParams>,
        head_w: Matrix,
        head_b: Vec<f64>,
    ) -> Result<Self> {
        let activation = spec.validate()?;
        let mut model = Self {
            spec,
            activation,
            proj_w,
            proj_b,
            blocks,
            head_w,
            head_b,
            names: Vec::new(),
            weights: ModelWeights {
                proj: Matrix::zeros(0, 0),
                proj_bias: Matrix::zeros(0, 0),
                blocks: Vec::new(),
                head: Matrix::zeros(0, 0),
                head_bias: Matrix::zeros(0, 0),
            },
        };
        model.names = model.param_names();
        model.check_raw_shapes()?;
        model.refresh()?;
        Ok(model)
    }

    fn check_raw_shapes(&self) -> Result<()> {
        let s = &self.spec;
        let bad = |what: &str| Err(Error::DimensionMismatch(format!("parameters: {what}")));
        if self.proj_w.shape() != (s.width, s.input_dim) || self.proj_b.len() != s.width {
            return bad("projection");
        }
        if self.head_w.shape() != (s.output_dim, s.width) || self.head_b.len() != s.output_dim {
            return bad("head");
        }
        if self.blocks.len() != s.blocks {
            return bad("block count");
        }
        for blk in &self.blocks {
            let (kind, dims) = match blk {
                BlockParams::Residual(p) => (ModelKind::Residual, p.dims()),
                BlockParams::Feedforward(p) => (ModelKind::Feedforward, p.dims()),
            };
            if kind != s.kind || dims.len() != s.depth + 1 || dims.iter().any(|&d| d != s.width) {
                return bad("block layout");
            }
        }
        Ok(())
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["proj.weight".to_string(), "proj.bias".to_string()];
        for (k, blk) in self.blocks.iter().enumerate() {
            match blk {
                BlockParams::Residual(p) => {
                    names.push(format!("block{k}.w_a"));
                    names.push(format!("block{k}.w_b"));
                    for j in 1..=p.depth() {
                        names.push(format!("block{k}.layer{j}.weight"));
                        names.push(format!("block{k}.layer{j}.bias"));
                    }
                }
                BlockParams::Feedforward(p) => {
                    for j in 1..=p.depth() {
                        names.push(format!("block{k}.layer{j}.weight"));
                        names.push(format!("block{k}.layer{j}.bias"));
                    }
                }
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Raw parameters in canonical order.
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out: Vec<((usize, usize), &[f64])> = vec![
            (self.proj_w.shape(), self.proj_w.data()),
            ((1, self.proj_b.len()), &self.proj_b),
        ];
        for blk in &self.blocks {
            match blk {
                BlockParams::Residual(p) => {
                    out.push((p.w_a.shape(), p.w_a.data()));
                    out.push((p.w_b.shape(), p.w_b.data()));
                    for (w, b) in p.layers.iter().zip(&p.biases) {
                        out.push((w.shape(), w.data()));
                        out.push(((1, b.len()), b));
                    }
                }
                BlockParams::Feedforward(p) => {
                    for (w, b) in p.layers.iter().zip(&p.biases) {
                        out.push((w.shape(), w.data()));
                        out.push(((1, b.len()), b));
                    }
                }
            }
        }
        out.push((self.head_w.shape(), self.head_w.data()));
        out.push(((1, self.head_b.len()), &self.head_b));
        out.into_iter()
            .zip(&self.names)
            .map(|((shape, data), name)| ParamRef { name, shape, data })
            .collect()
    }

    /// Mutable raw parameters in canonical order. Call [`Model::refresh`] afterwards.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.proj_w.data_mut(), &mut self.proj_b];
        for blk in &mut self.blocks {
            match blk {
                BlockParams::Residual(p) => {
                    out.push(p.w_a.data_mut());
                    out.push(p.w_b.data_mut());
                    for (w, b) in p.layers.iter_mut().zip(&mut p.biases) {
                        out.push(w.data_mut());
                        out.push(b);
                    }
                }
                BlockParams::Feedforward(p) => {
                    for (w, b) in p.layers.iter_mut().zip(&mut p.biases) {
                        out.push(w.data_mut());
                        out.push(b);
                    }
                }
            }
        }
        out.push(self.head_w.data_mut());
        out.push(&mut self.head_b);
        out
    }

    /// Re-materializes the cached weights from the raw parameters.
    pub fn refresh(&mut self) -> Result<()> {
        for blk in &self.blocks {
            match blk {
                BlockParams::Residual(p) => p.validate()?,
                BlockParams::Feedforward(p) => p.validate()?,
            }
        }
        let leaves: Vec<Matrix> = self
            .params()
            .iter()
            .map(|p| Matrix::from_raw(p.shape.0, p.shape.1, p.data.to_vec()))
            .collect();
        let weights = self.build_weights(&mut Eager, &leaves)?;
        if !weights_finite(&weights) {
            return Err(Error::Validation("materialized weights are not finite".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn weights(&self) -> &ModelWeights<Matrix> {
        &self.weights
    }

    /// Replaces the evaluated weights without touching the raw parameters.
    /// Used when loading stored weights; [`Model::verify`] then checks exactly
    /// what [`Model::forward`] evaluates.
    pub fn set_weights(&mut self, weights: ModelWeights<Matrix>) -> Result<()> {
        check_weight_shapes(&self.spec, &weights)?;
        self.weights = weights;
        Ok(())
    }

    /// Materializes evaluation weights from raw parameter handles given in canonical order.
    pub fn build_weights<B: Backend>(&self, be: &mut B, leaves: &[B::M]) -> Result<ModelWeights<B::M>, LinalgError> {
        let mut it = leaves.iter();
        let mut next = || it.next().expect("one leaf per parameter").clone();
        let proj_raw = next();
        let proj_bias = next();
        let proj = param::normalized_map_with(be, &proj_raw, 1.0, 1.0)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            match blk {
                BlockParams::Residual(p) => {
                    let w_a = next();
                    let w_b = next();
                    let mut layers = Vec::with_capacity(p.depth());
                    let mut biases = Vec::with_capacity(p.depth());
                    for _ in 0..p.depth() {
                        layers.push(next());
                        biases.push(next());
                    }
                    let core = param::residual_core(be, p.lipschitz, &w_a, &w_b, &layers, &p.alphas, p.b_variant)?;
                    blocks.push(BlockWeights {
                        a: Some(core.a),
                        b: Some(core.b),
                        c: core.c,
                        biases,
                    });
                }
                BlockParams::Feedforward(p) => {
                    let mut layers = Vec::with_capacity(p.depth());
                    let mut biases = Vec::with_capacity(p.depth());
                    for _ in 0..p.depth() {
                        layers.push(next());
                        biases.push(next());
                    }
                    let core = param::feedforward_core(be, p.lipschitz, &layers, &p.alphas)?;
                    blocks.push(BlockWeights {
                        a: None,
                        b: None,
                        c: core.c,
                        biases,
                    });
                }
            }
        }
        let head_raw = next();
        let head_bias = next();
        let head = param::normalized_map_with(be, &head_raw, 1.0, 1.0)?;
        Ok(ModelWeights {
            proj,
            proj_bias,
            blocks,
            head,
            head_bias,
        })
    }

    /// Logits for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "input has length {}, expected {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let out = forward_with(&mut Eager, &self.weights, &Matrix::row_vector(x), &self.activation);
        Ok(out.into_data())
    }

    /// Logits for every row of `x`.
    pub fn forward_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_batch_with(x, Execution::default())
    }

    pub fn forward_batch_with(&self, x: &Matrix, exec: Execution) -> Result<Matrix> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, expected {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        let ranges = par::chunks(x.rows(), 64);
        let parts = par::map(exec, &ranges, |r| {
            let idx: Vec<usize> = r.clone().collect();
            forward_with(&mut Eager, &self.weights, &x.select_rows(&idx), &self.activation)
        });
        let mut data = Vec::with_capacity(x.rows() * self.spec.output_dim);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Ok(Matrix::from_raw(x.rows(), self.spec.output_dim, data))
    }

    /// Product of the per-component bounds: projection and head are 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| match b {
                BlockParams::Residual(p) => p.lipschitz,
                BlockParams::Feedforward(p) => p.lipschitz,
            })
            .product()
    }

    /// LMI problems for every block, built from the evaluated weights.
    pub fn lmi_problems(&self) -> Vec<LmiProblem> {
        let lb = self.spec.block_lipschitz();
        self.weights
            .blocks
            .iter()
            .map(|bw| match (&bw.a, &bw.b) {
                (Some(a), Some(b)) => LmiProblem::with_unit_multipliers(lb, a.clone(), b.clone(), bw.c.clone()),
                _ => LmiProblem::feedforward_from_weights(bw.c.clone(), lb),
            })
            .collect()
    }

    /// Rebuilds every block's LMI from the evaluated weights and certifies it,
    /// and checks that projection and head are non-expansive.
    pub fn verify(&self) -> Result<Verification> {
        let mut blocks = Vec::with_capacity(self.weights.blocks.len());
        for prob in self.lmi_problems() {
            let m = lmi::assemble_residual_lmi(&prob)?;
            blocks.push(lmi::certify(&m, &prob.partition()?)?);
        }
        Ok(Verification {
            blocks,
            proj_norm: linalg::spectral_norm(&self.weights.proj),
            head_norm: linalg::spectral_norm(&self.weights.head),
        })
    }
}

/// Per-block certificates plus the norms of the linear end layers.
#[derive(Debug, Clone)]
pub struct Verification {
    pub blocks: Vec<Certificate>,
    pub proj_norm: f64,
    pub head_norm: f64,
}

impl Verification {
    pub const NORM_TOL: f64 = 1e-9;

    pub fn is_certified(&self) -> bool {
        self.blocks.iter().all(|c| c.is_certified())
            && self.proj_norm <= 1.0 + Self::NORM_TOL
            && self.head_norm <= 1.0 + Self::NORM_TOL
    }

    /// First failing `(block, pivot)` pair, both 1-based.
    pub fn first_failure(&self) -> Option<(usize, usize)> {
        self.blocks
            .iter()
            .enumerate()
            .find_map(|(k, c)| c.failing_block.map(|p| (k + 1, p)))
    }

    pub fn min_block_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(|c| c.min_block_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }
}

fn weights_finite(w: &ModelWeights<Matrix>) -> bool {
    let mut all = vec![&w.proj, &w.proj_bias, &w.head, &w.head_bias];
    for b in &w.blocks {
        all.extend(b.a.iter());
        all.extend(b.b.iter());
        all.extend(b.c.iter());
        all.extend(b.biases.iter());
    }
    all.iter().all(|m| m.is_finite())
}

fn check_weight_shapes(spec: &ModelSpec, w: &ModelWeights<Matrix>) -> Result<()> {
    let bad = |what: &str| Err(Error::DimensionMismatch(format!("stored weights: {what}")));
    let ws = spec.width;
    if w.proj.shape() != (ws, spec.input_dim) || w.proj_bias.shape() != (1, ws) {
        return bad("projection");
    }
    if w.head.shape() != (spec.output_dim, ws) || w.head_bias.shape() != (1, spec.output_dim) {
        return bad("head");
    }
    if w.blocks.len() != spec.blocks {
        return bad("block count");
    }
    for blk in &w.blocks {
        if blk.c.len() != spec.depth || blk.biases.len() != spec.depth {
            return bad("block depth");
        }
        if blk.c.iter().any(|c| c.shape() != (ws, ws)) || blk.biases.iter().any(|b| b.shape() != (1, ws)) {
            return bad("inner layer");
        }
        match (spec.kind, &blk.a, &blk.b) {
            (ModelKind::Residual, Some(a), Some(b)) if a.shape() == (ws, ws) && b.shape() == (ws, ws) => {}
            (ModelKind::Feedforward, None, None) => {}
            _ => return bad("A/B"),
        }
    }
    Ok(())
}

/// Forward pass over a batch (rows are samples).
pub fn forward_with<B: Backend>(be: &mut B, w: &ModelWeights<B::M>, x: &B::M, act: &ActivationSpec) -> B::M {
    let h = be.matmul_t(x, &w.proj);
    let mut h = be.add_row(&h, &w.proj_bias);
    for blk in &w.blocks {
        let mut z = h.clone();
        for (c, b) in blk.c.iter().zip(&blk.biases) {
            let v = be.matmul_t(&z, c);
            let v = be.add_row(&v, b);
            z = be.activate(&v, act);
        }
        h = match (&blk.a, &blk.b) {
            (Some(a), Some(bm)) => {
                let ax = be.matmul_t(&h, a);
                let bw = be.matmul_t(&z, bm);
                be.add(&ax, &bw)
            }
            _ => z,
        };
    }
    let logits = be.matmul_t(&h, &w.head);
    be.add_row(&logits, &w.head_bias)
}

/// Largest observed `||f(x) - f(x')|| / ||x - x'||` over sampled pairs.
///
/// Half the pairs are independent Gaussian points; the other half are
/// perturbations `x' = x + s u` with `u` a random unit direction and `s`
/// log-uniform in `[1e-3, 1]`.
pub fn empirical_lipschitz(model: &Model, num_pairs: usize, seed: u64) -> f64 {
    empirical_lipschitz_with(model, num_pairs, seed, Execution::default())
}

pub fn empirical_lipschitz_with(model: &Model, num_pairs: usize, seed: u64, exec: Execution) -> f64 {
    let d = model.spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(num_pairs * d);
    let mut ys = Vec::with_capacity(num_pairs * d);
    for k in 0..num_pairs {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let y: Vec<f64> = if k % 2 == 0 {
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
        } else {
            let u: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let s = 10f64.powf(rng.random_range(-3.0..=0.0));
            x.iter().zip(&u).map(|(xi, ui)| xi + s * ui / norm).collect()
        };
        xs.extend(x);
        ys.extend(y);
    }
    let xm = Matrix::from_raw(num_pairs, d, xs);
    let ym = Matrix::from_raw(num_pairs, d, ys);
    let fx = model.forward_batch_with(&xm, exec).expect("input width matches");
    let fy = model.forward_batch_with(&ym, exec).expect("input width matches");
    let ratios = par::map_range(exec, num_pairs, |i| {
        let num = dist(fx.row(i), fy.row(i));
        let den = dist(xm.row(i), ym.row(i));
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    });
    ratios.into_iter().fold(0.0, f64::max)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ModelKind) -> ModelSpec {
        let mut s = ModelSpec::new(kind, 3, 2, 4, 2);
        s.seed = 5;
        s
    }

    #[test]
    fn zero_model_outputs_zero() {
        for kind in [ModelKind::Residual, ModelKind::Feedforward] {
            let mut m = Model::new(spec(kind)).unwrap();
            for p in m.params_mut() {
                p.iter_mut().for_each(|v| *v = 0.0);
            }
            m.refresh().unwrap();
            assert_eq!(m.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
            assert_eq!(empirical_lipschitz(&m, 20, 1), 0.0);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Model::new(spec(ModelKind::Residual)).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let m = Model::new(spec(ModelKind::Residual)).unwrap();
        let x = Matrix::from_fn(130, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let batch = m.forward_batch(&x).unwrap();
        let seq = m.forward_batch_with(&x, Execution::Sequential).unwrap();
        assert_eq!(batch, seq);
        for i in [0, 64, 129] {
            assert_eq!(m.forward(x.row(i)).unwrap(), batch.row(i).to_vec());
        }
    }

    #[test]
    fn bound_is_product_of_block_budgets() {
        let mut s = spec(ModelKind::Residual);
        s.lipschitz = 2.0;
        s.blocks = 3;
        let m = Model::new(s).unwrap();
        assert!((m.lipschitz_bound() - 2.0).abs() < 1e-12);
        assert_eq!(Model::new(spec(ModelKind::Feedforward)).unwrap().lipschitz_bound(), 1.0);
    }

    #[test]
    fn fresh_models_verify() {
        for kind in [ModelKind::Residual, ModelKind::Feedforward] {
            let v = Model::new(spec(kind)).unwrap().verify().unwrap();
            assert!(v.is_certified(), "{kind:?}");
            assert_eq!(v.first_failure(), None);
        }
    }

    #[test]
    fn param_names_follow_canonical_order() {
        let m = Model::new(spec(ModelKind::Residual)).unwrap();
        let names: Vec<&str> = m.params().iter().map(|p| p.name).collect();
        assert_eq!(
            names,
            vec![
                "proj.weight",
                "proj.bias",
                "block0.w_a",
                "block0.w_b",
                "block0.layer1.weight",
                "block0.layer1.bias",
                "block0.layer2.weight",
                "block0.layer2.bias",
                "head.weight",
                "head.bias"
            ]
        );
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(ModelKind::Residual);
        s.depth = 0;
        assert!(Model::new(s).is_err());
        let mut s = spec(ModelKind::Residual);
        s.activation = "gelu".into();
        assert!(matches!(Model::new(s), Err(Error::UnsupportedActivation(_))));
        assert_eq!("LDLT-R".parse::<ModelKind>().unwrap(), ModelKind::Residual);
    }
}
