//! Versioned JSON model container.
//!
//! Every float is stored as the hex string of its IEEE-754 bit pattern, so a
//! save/load round trip is bitwise exact. Both the raw parameters and the
//! evaluated weights are stored; the evaluated weights are what a loaded
//! model runs and what verification checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Standardization;
use crate::fsutil;
use crate::linalg::Matrix;
use crate::network::{BlockWeights, Model, ModelSpec, ModelWeights};
use crate::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMetadata {
    pub dataset: String,
    pub fold: Option<usize>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub train_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: Model,
    pub standardization: Option<Standardization>,
    pub class_names: Vec<String>,
    pub metadata: TrainingMetadata,
}

impl ModelFile {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            standardization: None,
            class_names: Vec::new(),
            metadata: TrainingMetadata::default(),
        }
    }
}

mod hex {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn encode(v: f64) -> String {
        format!("0x{:016x}", v.to_bits())
    }

    pub fn decode(s: &str) -> Option<f64> {
        let digits = s.strip_prefix("0x")?;
        if digits.len() != 16 {
            return None;
        }
        u64::from_str_radix(digits, 16).ok().map(f64::from_bits)
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| encode(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| decode(s).ok_or_else(|| D::Error::custom(format!("bad float encoding {s:?}"))))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    shape: [usize; 2],
    #[serde(with = "hex")]
    data: Vec<f64>,
}

impl Tensor {
    fn from_matrix(m: &Matrix) -> Self {
        Self {
            shape: [m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    fn into_matrix(self) -> Result<Matrix> {
        Matrix::new(self.shape[0], self.shape[1], self.data).map_err(|e| Error::CorruptFile(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    #[serde(flatten)]
    tensor: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredBlock {
    a: Option<Tensor>,
    b: Option<Tensor>,
    c: Vec<Tensor>,
    biases: Vec<Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredWeights {
    proj: Tensor,
    proj_bias: Tensor,
    blocks: Vec<StoredBlock>,
    head: Tensor,
    head_bias: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredStandardization {
    #[serde(with = "hex")]
    mean: Vec<f64>,
    #[serde(with = "hex")]
    std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Stored {
    format_version: u64,
    spec: ModelSpec,
    params: Vec<NamedTensor>,
    weights: StoredWeights,
    standardization: Option<StoredStandardization>,
    #[serde(default)]
    class_names: Vec<String>,
    #[serde(default)]
    metadata: TrainingMetadata,
}

fn store_weights(w: &ModelWeights<Matrix>) -> StoredWeights {
    StoredWeights {
        proj: Tensor::from_matrix(&w.proj),
        proj_bias: Tensor::from_matrix(&w.proj_bias),
        blocks: w
            .blocks
            .iter()
            .map(|b| StoredBlock {
                a: b.a.as_ref().map(Tensor::from_matrix),
                b: b.b.as_ref().map(Tensor::from_matrix),
                c: b.c.iter().map(Tensor::from_matrix).collect(),
                biases: b.biases.iter().map(Tensor::from_matrix).collect(),
            })
            .collect(),
        head: Tensor::from_matrix(&w.head),
        head_bias: Tensor::from_matrix(&w.head_bias),
    }
}

fn restore_weights(w: StoredWeights) -> Result<ModelWeights<Matrix>> {
    let many = |ts: Vec<Tensor>| ts.into_iter().map(Tensor::into_matrix).collect::<Result<Vec<_>>>();
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for b in w.blocks {
        blocks.push(BlockWeights {
            a: b.a.map(Tensor::into_matrix).transpose()?,
            b: b.b.map(Tensor::into_matrix).transpose()?,
            c: many(b.c)?,
            biases: many(b.biases)?,
        });
    }
    Ok(ModelWeights {
        proj: w.proj.into_matrix()?,
        proj_bias: w.proj_bias.into_matrix()?,
        blocks,
        head: w.head.into_matrix()?,
        head_bias: w.head_bias.into_matrix()?,
    })
}

pub fn to_json(file: &ModelFile) -> Result<String> {
    let m = &file.model;
    let stored = Stored {
        format_version: FORMAT_VERSION,
        spec: m.spec.clone(),
        params: m
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.to_string(),
                tensor: Tensor {
                    shape: [p.shape.0, p.shape.1],
                    data: p.data.to_vec(),
                },
            })
            .collect(),
        weights: store_weights(m.weights()),
        standardization: file.standardization.as_ref().map(|s| StoredStandardization {
            mean: s.mean.clone(),
            std: s.std.clone(),
        }),
        class_names: file.class_names.clone(),
        metadata: file.metadata.clone(),
    };
    serde_json::to_string_pretty(&stored).map_err(|e| Error::Validation(e.to_string()))
}

pub fn from_json(text: &str) -> Result<ModelFile> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::CorruptFile(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::CorruptFile("missing format_version".into()))?;
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let stored: Stored = serde_json::from_value(value).map_err(|e| Error::CorruptFile(e.to_string()))?;
    let corrupt = |e: Error| Error::CorruptFile(e.to_string());

    let mut model = Model::new(stored.spec).map_err(corrupt)?;
    {
        let names: Vec<(String, (usize, usize))> =
            model.params().iter().map(|p| (p.name.to_string(), p.shape)).collect();
        if names.len() != stored.params.len() {
            return Err(Error::CorruptFile(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                stored.params.len()
            )));
        }
        let mut slots = model.params_mut();
        for ((name, shape), (slot, t)) in names.iter().zip(slots.iter_mut().zip(&stored.params)) {
            if &t.name != name || (t.tensor.shape[0], t.tensor.shape[1]) != *shape || t.tensor.data.len() != slot.len() {
                return Err(Error::CorruptFile(format!("parameter {:?} does not match {name}", t.name)));
            }
            slot.copy_from_slice(&t.tensor.data);
        }
    }
    model.refresh().map_err(corrupt)?;
    let weights = restore_weights(stored.weights)?;
    model.set_weights(weights).map_err(corrupt)?;

    let standardization = match stored.standardization {
        Some(s) => {
            let dim = model.spec.input_dim;
            if s.mean.len() != dim || s.std.len() != dim || s.std.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::CorruptFile("invalid standardization".into()));
            }
            Some(Standardization { mean: s.mean, std: s.std })
        }
        None => None,
    };
    if !stored.class_names.is_empty() && stored.class_names.len() != model.spec.output_dim {
        return Err(Error::CorruptFile("class name count differs from output width".into()));
    }
    Ok(ModelFile {
        model,
        standardization,
        class_names: stored.class_names,
        metadata: stored.metadata,
    })
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    fsutil::atomic_write(path, to_json(file)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
