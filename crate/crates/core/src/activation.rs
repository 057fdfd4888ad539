//! Slope-restricted elementwise activations and their slope bounds.

use serde::{Deserialize, Serialize};

use crate::Error;

const LEAKY_SLOPE: f64 = 1e-2;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Elu,
    Hardtanh,
    Softplus,
    Hardsigmoid,
    Selu,
}

/// An activation together with its slope bounds `m <= f' <= L`.
///
/// `s` and `p` are the two auxiliary table columns; they are carried as
/// metadata and not used in any computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub slope_min: f64,
    pub slope_max: f64,
    pub s: f64,
    pub p: f64,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Elu => "elu",
            ActivationKind::Hardtanh => "hardtanh",
            ActivationKind::Softplus => "softplus",
            ActivationKind::Hardsigmoid => "hardsigmoid",
            ActivationKind::Selu => "selu",
        }
    }
}

/// Looks up a built-in activation by name.
pub fn builtin(name: &str) -> Result<ActivationSpec, Error> {
    use ActivationKind::*;
    let (kind, m, l, s, p) = match name.to_ascii_lowercase().as_str() {
        "relu" => (Relu, 0.0, 1.0, 1.0, 0.0),
        "leaky_relu" | "leakyrelu" => (LeakyRelu, LEAKY_SLOPE, 1.0, 1.0 + LEAKY_SLOPE, LEAKY_SLOPE),
        "tanh" => (Tanh, 0.0, 1.0, 1.0, 0.0),
        "sigmoid" => (Sigmoid, 0.0, 1.0, 1.0, 0.0),
        "elu" => (Elu, 0.0, 1.0, 1.0, 0.0),
        "hardtanh" => (Hardtanh, 0.0, 1.0, 1.0, 0.0),
        "softplus" => (Softplus, 0.0, 1.0, 1.0, 0.0),
        "hardsigmoid" => (Hardsigmoid, 0.0, 1.0 / 6.0, 1.0 / 6.0, 0.0),
        "selu" => (Selu, 0.0, SELU_SCALE * SELU_ALPHA, SELU_SCALE * SELU_ALPHA, 0.0),
        _ => return Err(Error::UnsupportedActivation(name.to_string())),
    };
    Ok(ActivationSpec {
        kind,
        slope_min: m,
        slope_max: l,
        s,
        p,
    })
}

impl ActivationSpec {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// The constructive parameterization assumes slopes normalized to `(0, 1)`.
    pub fn require_unit_slopes(&self) -> Result<(), Error> {
        if self.slope_min == 0.0 && self.slope_max == 1.0 {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "activation {} has slope bounds ({}, {}); parameterized layers require (0, 1)",
                self.name(),
                self.slope_min,
                self.slope_max
            )))
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        use ActivationKind::*;
        match self.kind {
            Relu => x.max(0.0),
            LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Tanh => x.tanh(),
            Sigmoid => sigmoid(x),
            Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Hardtanh => x.clamp(-1.0, 1.0),
            Softplus => {
                // log(1 + e^x) without overflow
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            }
            Hardsigmoid => ((x + 3.0) / 6.0).clamp(0.0, 1.0),
            Selu => {
                if x > 0.0 {
                    SELU_SCALE * x
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp_m1()
                }
            }
        }
    }

    /// Derivative, taking the right-hand value at kinks.
    pub fn derivative(&self, x: f64) -> f64 {
        use ActivationKind::*;
        match self.kind {
            Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Hardtanh => {
                if (-1.0..1.0).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Softplus => sigmoid(x),
            Hardsigmoid => {
                if (-3.0..3.0).contains(&x) {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
            Selu => {
                if x > 0.0 {
                    SELU_SCALE
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp()
                }
            }
        }
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| self.apply(*x)).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
