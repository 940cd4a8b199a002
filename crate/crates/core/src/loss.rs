//! Class weighting, label smoothing and weighted cross-entropy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How per-class loss weights are derived from class counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    /// `w_i = N_total · N_i / m` exactly as printed; up-weights frequent classes.
    Literal,
    /// `w_i = N_total / (m · N_i)`; up-weights rare classes.
    #[default]
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeightSpec {
    pub counts: Vec<u64>,
    pub mode: ClassWeightMode,
}

impl ClassWeightSpec {
    pub fn new(counts: Vec<u64>, mode: ClassWeightMode) -> Self {
        ClassWeightSpec { counts, mode }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn class_weights(spec: &ClassWeightSpec) -> Result<Vec<f64>> {
    let m = spec.counts.len();
    if m == 0 {
        return Err(Error::Validation("class weights need at least one class".into()));
    }
    let total = spec.total() as f64;
    let m_f = m as f64;
    spec.counts
        .iter()
        .enumerate()
        .map(|(i, &n)| match spec.mode {
            ClassWeightMode::Literal => Ok(total * n as f64 / m_f),
            ClassWeightMode::InverseFrequency => {
                if n == 0 {
                    Err(Error::Domain(format!("class {} has no samples", i)))
                } else {
                    Ok(total / (m_f * n as f64))
                }
            }
        })
        .collect()
}

/// Smoothed target distribution: `1-γ` on the true class, `γ/(m-1)` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedTarget {
    pub label: usize,
    pub gamma: f64,
    pub dist: Vec<f64>,
}

pub fn smooth_labels(label: usize, m: usize, gamma: f64) -> Result<SmoothedTarget> {
    if m < 2 {
        return Err(Error::Domain(format!("label smoothing needs at least 2 classes, got {}", m)));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Domain(format!("smoothing {} not in [0, 1)", gamma)));
    }
    if label >= m {
        return Err(Error::Domain(format!("label {} out of range for {} classes", label, m)));
    }
    let mut dist = vec![gamma / (m - 1) as f64; m];
    dist[label] = 1.0 - gamma;
    Ok(SmoothedTarget { label, gamma, dist })
}

/// Batch reduction for [`weighted_cross_entropy`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `Σ_i w_{y_i} ℓ_i / Σ_i w_{y_i}`.
    #[default]
    WeightedMean,
    /// `Σ_i w_{y_i} ℓ_i`.
    Sum,
}

/// Cross-entropy between smoothed targets and `softmax(logits)`, each sample
/// scaled by the weight of its true class.
pub fn weighted_cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[SmoothedTarget],
    weights: &[f64],
    reduction: Reduction,
) -> Result<Var> {
    let s = g.shape(logits);
    if s.rank() != 2 || s.dims()[0] != targets.len() || s.dims()[1] != weights.len() {
        return Err(Error::Dimension(format!("logits {} for {} targets over {} classes", s, targets.len(), weights.len())));
    }
    if !g.value(logits).is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Domain(format!("class weight {} is not positive", w)));
    }
    let (b, m) = (s.dims()[0], s.dims()[1]);
    let applied: f64 = targets.iter().map(|t| weights[t.label]).sum();
    let norm = match reduction {
        Reduction::WeightedMean => applied,
        Reduction::Sum => 1.0,
    };
    let mut coef = Vec::with_capacity(b * m);
    for t in targets {
        if t.dist.len() != m {
            return Err(Error::Dimension(format!("target over {} classes, logits over {}", t.dist.len(), m)));
        }
        let w = weights[t.label] / norm;
        coef.extend(t.dist.iter().map(|p| T::from_f64(-p * w)));
    }
    let coef = g.constant(Tensor::from_vec(&[b, m], coef)?);
    let logp = g.log_softmax(logits)?;
    let terms = g.mul(logp, coef)?;
    g.sum(terms)
}
