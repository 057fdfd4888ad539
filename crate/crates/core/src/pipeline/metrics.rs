//! Width heuristic and margin-based robustness certification.

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::network::Model;
use crate::Result;

/// ℓ2 radii reported by default, in units of one 8-bit intensity step.
pub const STANDARD_RADII: [f64; 4] = [36.0 / 255.0, 72.0 / 255.0, 108.0 / 255.0, 1.0];

/// Hidden width from the feature count `n` and class count `m`:
/// `b = min(max(4n, 32), 512)`, scaled by 1.25 when `m > 10`, then rounded
/// to the nearest power of two in log scale (ties go up).
pub fn width_heuristic(n: usize, m: usize) -> usize {
    let mut b = (4 * n).clamp(32, 512) as f64;
    if m > 10 {
        b *= 1.25;
    }
    let e = b.log2();
    let k = if e - e.floor() >= 0.5 { e.floor() + 1.0 } else { e.floor() };
    1usize << (k as u32)
}

/// Whether the prediction is correct and cannot change within an ℓ2 ball of
/// radius `eps`: the logit margin must exceed `√2 · L · eps`.
pub fn certified_correct(logits: &[f64], label: usize, eps: f64, lipschitz: f64) -> bool {
    margin(logits, label) > std::f64::consts::SQRT_2 * lipschitz * eps
}

/// `logit_label - max_{j != label} logit_j`.
pub fn margin(logits: &[f64], label: usize) -> f64 {
    let runner_up = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[label] - runner_up
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub clean_accuracy: f64,
    pub radii: Vec<f64>,
    /// Certified accuracy at each radius.
    pub certified: Vec<f64>,
    pub lipschitz_bound: f64,
    pub samples: usize,
}

impl CertificationReport {
    pub fn from_logits(logits: &Matrix, labels: &[usize], radii: &[f64], lipschitz: f64) -> Self {
        let n = labels.len();
        let denom = n.max(1) as f64;
        let margins: Vec<f64> = (0..n).map(|i| margin(logits.row(i), labels[i])).collect();
        let clean = margins.iter().filter(|&&m| m > 0.0).count() as f64 / denom;
        let certified = radii
            .iter()
            .map(|&eps| {
                let t = std::f64::consts::SQRT_2 * lipschitz * eps;
                margins.iter().filter(|&&m| m > t).count() as f64 / denom
            })
            .collect();
        Self {
            clean_accuracy: clean,
            radii: radii.to_vec(),
            certified,
            lipschitz_bound: lipschitz,
            samples: n,
        }
    }

    pub fn is_monotone(&self) -> bool {
        let mut order: Vec<usize> = (0..self.radii.len()).collect();
        order.sort_by(|&a, &b| self.radii[a].total_cmp(&self.radii[b]));
        order.windows(2).all(|w| self.certified[w[0]] >= self.certified[w[1]])
            && self.certified.iter().all(|&c| c <= self.clean_accuracy)
    }
}

/// Clean accuracy counts a row only when its label is the unique argmax.
pub fn evaluate(model: &Model, x: &Matrix, labels: &[usize], radii: &[f64]) -> Result<CertificationReport> {
    let logits = model.forward_batch(x)?;
    Ok(CertificationReport::from_logits(&logits, labels, radii, model.lipschitz_bound()))
}

/// Parses `36/255`, `0.5` or `1` style radii.
pub fn parse_radius(s: &str) -> Option<f64> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => s.parse().ok()?,
    };
    (v.is_finite() && v >= 0.0).then_some(v)
}
