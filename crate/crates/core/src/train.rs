//! Training raw parameters through the materialization maps.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backend::{self, Backend};
use crate::fsutil;
use crate::linalg::Matrix;
use crate::network::{self, Model};
use crate::{Error, Result};

/// Datasets below this many training rows are trained full-batch.
pub const FULL_BATCH_BELOW: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub lr_halving_factor: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Parameter-name prefixes held fixed during training.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 100,
            plateau_patience: 8,
            lr_halving_factor: 0.5,
            early_stop_patience: 30,
            batch_size: 64,
            seed: 0,
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("eps", self.eps),
            ("lr_halving_factor", self.lr_halving_factor),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Validation(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.lr_halving_factor > 0.0 && self.lr_halving_factor <= 1.0) {
            return Err(Error::Validation("lr_halving_factor must lie in (0, 1]".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.plateau_patience == 0 {
            return Err(Error::Validation(
                "max_epochs, batch_size and plateau_patience must be positive".into(),
            ));
        }
        if self.early_stop_patience < self.plateau_patience {
            return Err(Error::Validation(
                "early_stop_patience must be at least plateau_patience".into(),
            ));
        }
        Ok(())
    }

    /// Rows per step for a training set of `n` rows.
    pub fn effective_batch(&self, n: usize) -> usize {
        if n < FULL_BATCH_BELOW {
            n.max(1)
        } else {
            self.batch_size.min(n)
        }
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// Class-weighted cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub class_weights: Vec<f64>,
}

impl LossSpec {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            class_weights: vec![1.0; num_classes],
        }
    }

    /// `w_k = N / (K * count_k)`; absent classes get weight 1.
    pub fn balanced(labels: &[usize], num_classes: usize) -> Self {
        let mut counts = vec![0usize; num_classes];
        for &y in labels {
            counts[y] += 1;
        }
        let n = labels.len() as f64;
        let k = num_classes as f64;
        let class_weights = counts
            .iter()
            .map(|&c| if c == 0 { 1.0 } else { n / (k * c as f64) })
            .collect();
        Self { class_weights }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_weights.is_empty() || self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation("class weights must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Mean over the batch of `-w_y log softmax(logits)_y`.
pub fn loss(logits: &Matrix, labels: &[usize], weights: &[f64]) -> f64 {
    backend::cross_entropy_with_probs(logits, labels, weights).0
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and reverse-mode gradients for every raw parameter, in canonical order.
pub fn grad(model: &Model, x: &Matrix, labels: &[usize], spec: &LossSpec) -> Result<(f64, Vec<Vec<f64>>)> {
    if x.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if x.cols() != model.spec.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "input has {} columns, expected {}",
            x.cols(),
            model.spec.input_dim
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= spec.class_weights.len()) {
        return Err(Error::Validation(format!("label {y} out of range")));
    }
    let mut tape = Tape::new();
    let params = model.params();
    let leaves: Vec<_> = params
        .iter()
        .map(|p| tape.leaf(Matrix::from_raw(p.shape.0, p.shape.1, p.data.to_vec())))
        .collect();
    let weights = model.build_weights(&mut tape, &leaves)?;
    let input = tape.constant(x.clone());
    let logits = network::forward_with(&mut tape, &weights, &input, &model.activation);
    let root = tape.weighted_cross_entropy(&logits, labels, &spec.class_weights);
    let value = tape.value(&root)[(0, 0)];
    let grads = tape.backward(root)?;
    let mut out = Vec::with_capacity(params.len());
    for (p, v) in params.iter().zip(&leaves) {
        let g = grads.get_or_zeros(*v, p.shape).into_data();
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.to_string()));
        }
        out.push(g);
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteGradient("loss".into()));
    }
    Ok((value, out))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Updates every unmasked tensor in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], mask: &[bool]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powf(self.step as f64);
        let bc2 = 1.0 - self.beta2.powf(self.step as f64);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !mask[k] {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Training and validation rows.
#[derive(Debug, Clone)]
pub struct Split {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub val_x: Matrix,
    pub val_y: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch (1-based) of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_acc,lr\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_acc, r.lr));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))?;
        fsutil::atomic_write(path, &buf)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub history: History,
}

pub fn fit(model: Model, split: &Split, cfg: &TrainConfig, loss_spec: &LossSpec) -> Result<FitResult> {
    fit_observed(model, split, cfg, loss_spec, |_, _| Ok(()))
}

/// Like [`fit`], calling `observe` after every epoch with the current iterate.
pub fn fit_observed<F>(
    mut model: Model,
    split: &Split,
    cfg: &TrainConfig,
    loss_spec: &LossSpec,
    mut observe: F,
) -> Result<FitResult>
where
    F: FnMut(&EpochRecord, &Model) -> Result<()>,
{
    cfg.validate()?;
    loss_spec.validate()?;
    let n = split.train_x.rows();
    if n == 0 || n != split.train_y.len() || split.val_x.rows() != split.val_y.len() {
        return Err(Error::Validation("training split is empty or mislabeled".into()));
    }
    let mask: Vec<bool> = model.params().iter().map(|p| !cfg.is_frozen(p.name)).collect();
    let batch = cfg.effective_batch(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg);
    let mut order: Vec<usize> = (0..n).collect();

    let mut history = History::default();
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    let mut since_plateau = 0usize;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(batch) {
            let xb = split.train_x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| split.train_y[i]).collect();
            let (l, g) = grad(&model, &xb, &yb, loss_spec)?;
            total += l * idx.len() as f64;
            opt.step(&mut model.params_mut(), &g, &mask);
            model.refresh()?;
        }
        let val_acc = if split.val_y.is_empty() {
            accuracy(&model.forward_batch(&split.train_x)?, &split.train_y)
        } else {
            accuracy(&model.forward_batch(&split.val_x)?, &split.val_y)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / n as f64,
            val_acc,
            lr: opt.lr,
        };
        history.records.push(rec);
        observe(&rec, &model)?;

        if val_acc > best_acc {
            best_acc = val_acc;
            best = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
            since_plateau = 0;
        } else {
            since_best += 1;
            since_plateau += 1;
            if since_plateau >= cfg.plateau_patience {
                opt.lr *= cfg.lr_halving_factor;
                since_plateau = 0;
            }
            if since_best >= cfg.early_stop_patience {
                break;
            }
        }
    }
    history.best_val_acc = best_acc;
    Ok(FitResult { model: best, history })
}
