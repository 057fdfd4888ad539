//! CSV ingestion, stratified folds and per-fold standardization.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::train::Split;
use crate::{Error, Result};

pub const DEFAULT_FOLDS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    /// Label column; `None` means the last one.
    pub label_column: Option<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            label_column: None,
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Raw, unstandardized features.
    pub features: Matrix,
    pub labels: Vec<usize>,
    /// Original label strings, indexed by class.
    pub class_names: Vec<String>,
    /// Fold index of every row.
    pub folds: Vec<usize>,
    pub num_folds: usize,
}

/// Per-feature affine map fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Standard deviations below this are clamped to 1.
    pub const MIN_STD: f64 = 1e-12;

    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = x.column_sums().iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < Self::MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "data has {} features, standardization expects {}",
                x.cols(),
                self.mean.len()
            )));
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.mean[j]) / self.std[j]))
    }
}

/// One cross-validation fold with its standardization.
#[derive(Debug, Clone)]
pub struct Fold {
    pub index: usize,
    pub split: Split,
    pub standardization: Standardization,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn fold_indices(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| self.folds[i] != k)
    }

    /// Fold `k`: the other folds train, fold `k` validates; features are
    /// standardized with statistics from the training rows only.
    pub fn fold(&self, k: usize) -> Result<Fold> {
        if k >= self.num_folds {
            return Err(Error::Validation(format!("fold {k} out of range 0..{}", self.num_folds)));
        }
        let (train, val) = self.fold_indices(k);
        let train_raw = self.features.select_rows(&train);
        let standardization = Standardization::fit(&train_raw);
        let split = Split {
            train_x: standardization.apply(&train_raw)?,
            train_y: train.iter().map(|&i| self.labels[i]).collect(),
            val_x: standardization.apply(&self.features.select_rows(&val))?,
            val_y: val.iter().map(|&i| self.labels[i]).collect(),
        };
        Ok(Fold {
            index: k,
            split,
            standardization,
        })
    }

    /// Maps label strings onto this dataset's class indices.
    pub fn relabel(&self, class_names: &[String]) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&y| {
                let name = &self.class_names[y];
                class_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Validation(format!("label {name:?} unknown to the model")))
            })
            .collect()
    }
}

/// Assigns each row a fold so that every class is spread evenly.
///
/// Rows of each class are shuffled and dealt round-robin; the dealing
/// position carries over between classes so fold sizes stay balanced.
pub fn stratified_folds(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0usize;
    for c in 0..num_classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(&mut rng);
        for i in rows {
            folds[i] = next % k;
            next += 1;
        }
    }
    folds
}

pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    if opts.folds < 2 {
        return Err(Error::Validation("at least two folds are required".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let width = headers.len();
    if width < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "need at least one feature and one label column".into(),
        });
    }
    let label_col = opts.label_column.unwrap_or(width - 1);
    if label_col >= width {
        return Err(Error::Validation(format!("label column {label_col} out of range")));
    }

    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            if j == label_col {
                raw_labels.push(field.to_string());
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column {} is not a number: {field:?}", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("column {} is not finite", j + 1),
                });
            }
            data.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let class_names = sorted_classes(&raw_labels);
    if class_names.len() < 2 {
        return Err(Error::SingleClass(path.to_path_buf()));
    }
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| class_names.iter().position(|c| c == l).expect("collected above"))
        .collect();
    let n = labels.len();
    let features = Matrix::new(n, width - 1, data)?;
    let folds = stratified_folds(&labels, class_names.len(), opts.folds, opts.seed);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        features,
        labels,
        class_names,
        folds,
        num_folds: opts.folds,
    })
}

/// Distinct labels, numerically ordered when they all parse as numbers.
fn sorted_classes(raw: &[String]) -> Vec<String> {
    let set: BTreeSet<&String> = raw.iter().collect();
    let mut names: Vec<String> = set.into_iter().cloned().collect();
    if names.iter().all(|s| s.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    names
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}
