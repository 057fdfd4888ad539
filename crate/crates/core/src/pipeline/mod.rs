//! Datasets, certification metrics, model files and cross-validated runs.

pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod model_file;

pub use dataset::{load_csv, stratified_folds, CsvOptions, Dataset, Fold, Standardization};
pub use experiment::{eval_all, train_fold, AggregateRow, FoldRun, ModelOptions, RunConfig};
pub use metrics::{certified_correct, evaluate, width_heuristic, CertificationReport, STANDARD_RADII};
pub use model_file::{load_model, save_model, ModelFile, TrainingMetadata, FORMAT_VERSION};
