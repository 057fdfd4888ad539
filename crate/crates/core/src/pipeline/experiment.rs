//! Cross-validated training runs and the aggregate report.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{load_csv, CsvOptions, Dataset};
use super::metrics::{evaluate, width_heuristic, CertificationReport, STANDARD_RADII};
use super::model_file::{ModelFile, TrainingMetadata};
use crate::fsutil;
use crate::network::{Model, ModelKind, ModelSpec};
use crate::par::{self, Execution};
use crate::param::BVariant;
use crate::train::{self, History, LossSpec, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    /// Fixed width; the width heuristic is used when absent.
    pub width: Option<usize>,
    pub depth: usize,
    pub activation: String,
    pub blocks: usize,
    pub b_variant: BVariant,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            width: None,
            depth: 4,
            activation: "relu".into(),
            blocks: 1,
            b_variant: BVariant::Tight,
        }
    }
}

/// Everything a `--config` file may set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelOptions,
    pub train: TrainConfig,
}

pub fn model_spec(kind: ModelKind, data: &Dataset, opts: &ModelOptions, lipschitz: f64, seed: u64) -> ModelSpec {
    ModelSpec {
        kind,
        input_dim: data.num_features(),
        output_dim: data.num_classes(),
        width: opts
            .width
            .unwrap_or_else(|| width_heuristic(data.num_features(), data.num_classes())),
        depth: opts.depth,
        lipschitz,
        activation: opts.activation.clone(),
        seed,
        blocks: opts.blocks,
        b_variant: opts.b_variant,
    }
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub file: ModelFile,
    pub history: History,
    /// Scores on the held-out fold.
    pub report: CertificationReport,
}

/// Trains on every fold but `fold` and scores on `fold`.
pub fn train_fold(
    data: &Dataset,
    fold: usize,
    kind: ModelKind,
    lipschitz: f64,
    seed: u64,
    cfg: &RunConfig,
) -> Result<FoldRun> {
    let f = data.fold(fold)?;
    let spec = model_spec(kind, data, &cfg.model, lipschitz, seed);
    let model = Model::new(spec)?;
    let loss = LossSpec::balanced(&f.split.train_y, data.num_classes());
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = train::fit(model, &f.split, &tc, &loss)?;
    let report = evaluate(&out.model, &f.split.val_x, &f.split.val_y, &STANDARD_RADII)?;
    let metadata = TrainingMetadata {
        dataset: data.name.clone(),
        fold: Some(fold),
        epochs: out.history.records.len(),
        best_epoch: out.history.best_epoch,
        best_val_acc: out.history.best_val_acc,
        train_seed: seed,
    };
    Ok(FoldRun {
        file: ModelFile {
            model: out.model,
            standardization: Some(f.standardization),
            class_names: data.class_names.clone(),
            metadata,
        },
        history: out.history,
        report,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub dataset: String,
    pub algorithm: String,
    pub clean: (f64, f64),
    /// One `(mean, std)` per radius.
    pub certified: Vec<(f64, f64)>,
}

impl AggregateRow {
    pub fn from_reports(dataset: &str, kind: ModelKind, reports: &[CertificationReport]) -> Self {
        let clean: Vec<f64> = reports.iter().map(|r| r.clean_accuracy).collect();
        let radii = reports.first().map(|r| r.radii.len()).unwrap_or(0);
        let certified = (0..radii)
            .map(|k| mean_std(&reports.iter().map(|r| r.certified[k]).collect::<Vec<_>>()))
            .collect();
        Self {
            dataset: dataset.to_string(),
            algorithm: kind.label().to_string(),
            clean: mean_std(&clean),
            certified,
        }
    }
}

/// Column stem for a radius, e.g. `cert36` for 36/255.
pub fn radius_column(r: f64) -> String {
    format!("cert{}", (r * 255.0).round() as i64)
}

pub fn report_csv(rows: &[AggregateRow], radii: &[f64]) -> String {
    let mut s = String::from("dataset,algorithm,clean_mean,clean_std");
    for &r in radii {
        let c = radius_column(r);
        s.push_str(&format!(",{c}_mean,{c}_std"));
    }
    s.push('\n');
    for row in rows {
        s.push_str(&format!("{},{},{},{}", row.dataset, row.algorithm, row.clean.0, row.clean.1));
        for (m, sd) in &row.certified {
            s.push_str(&format!(",{m},{sd}"));
        }
        s.push('\n');
    }
    s
}

pub fn write_report(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    fsutil::atomic_write(path, report_csv(rows, &STANDARD_RADII).as_bytes())
}

/// All `*.csv` files directly inside `dir`, sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Full cross-validation over every dataset in `dir` for each model kind.
/// Folds run concurrently under [`Execution::Parallel`].
pub fn eval_all(
    dir: &Path,
    kinds: &[ModelKind],
    lipschitz: f64,
    seed: u64,
    cfg: &RunConfig,
    exec: Execution,
) -> Result<Vec<AggregateRow>> {
    let files = dataset_files(dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!("no CSV files in {}", dir.display())));
    }
    let opts = CsvOptions {
        seed,
        ..CsvOptions::default()
    };
    let mut rows = Vec::new();
    for path in files {
        let data = load_csv(&path, &opts)?;
        let jobs: Vec<(ModelKind, usize)> = kinds
            .iter()
            .flat_map(|&k| (0..data.num_folds).map(move |f| (k, f)))
            .collect();
        let runs = par::map(exec, &jobs, |&(kind, fold)| {
            train_fold(&data, fold, kind, lipschitz, seed, cfg).map(|r| r.report)
        });
        let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
        for (i, &kind) in kinds.iter().enumerate() {
            let reports = &runs[i * data.num_folds..(i + 1) * data.num_folds];
            rows.push(AggregateRow::from_reports(&data.name, kind, reports));
        }
    }
    Ok(rows)
}
