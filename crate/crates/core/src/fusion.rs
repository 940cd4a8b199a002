//! Weighted argmax fusion of several models' class probabilities, with
//! weights fitted to maximize F1-macro.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cobyla::{cobyla_minimize, CobylaError, CobylaOptions, Constraint};
use crate::error::{Error, Result};
use crate::metrics::{argmax, f1_scores, F1Report};

/// How the weight matrix is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    /// For every class the model weights are non-negative and sum to 1.
    #[default]
    PerClassSimplex,
    /// All weights together sum to 1; entries may be negative.
    GlobalSums,
}

impl ConstraintMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConstraintMode::PerClassSimplex => "per_class_simplex",
            ConstraintMode::GlobalSums => "global_sums",
        }
    }
}

/// Per-utterance probability matrices from `n_models` models.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub model_names: Vec<String>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `probs[u][i][j]`: model `i`'s probability of class `j` for utterance `u`.
    pub probs: Vec<Vec<Vec<f64>>>,
    pub num_classes: usize,
}

impl PredictionSet {
    pub fn new(
        model_names: Vec<String>,
        ids: Vec<String>,
        labels: Vec<usize>,
        probs: Vec<Vec<Vec<f64>>>,
        num_classes: usize,
    ) -> Result<Self> {
        let set = PredictionSet { model_names, ids, labels, probs, num_classes };
        set.validate()?;
        Ok(set)
    }

    pub fn num_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n_m = self.num_models();
        if n_m == 0 {
            return Err(Error::Validation("prediction set has no models".into()));
        }
        if self.ids.len() != self.labels.len() || self.probs.len() != self.labels.len() {
            return Err(Error::Dimension(format!(
                "{} ids, {} labels, {} probability matrices",
                self.ids.len(),
                self.labels.len(),
                self.probs.len()
            )));
        }
        for (u, m) in self.probs.iter().enumerate() {
            if self.labels[u] >= self.num_classes {
                return Err(Error::Validation(format!("utterance {} has label {}", self.ids[u], self.labels[u])));
            }
            if m.len() != n_m {
                return Err(Error::Dimension(format!("utterance {} has {} model rows, expected {}", self.ids[u], m.len(), n_m)));
            }
            for (i, row) in m.iter().enumerate() {
                if row.len() != self.num_classes {
                    return Err(Error::Dimension(format!(
                        "utterance {} model {} has {} classes, expected {}",
                        self.ids[u],
                        self.model_names[i],
                        row.len(),
                        self.num_classes
                    )));
                }
                let s: f64 = row.iter().sum();
                if row.iter().any(|p| !p.is_finite()) || (s - 1.0).abs() > 1e-4 {
                    return Err(Error::Validation(format!(
                        "utterance {} model {} probabilities sum to {}",
                        self.ids[u], self.model_names[i], s
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    /// `w[i][j]`: weight of model `i` for class `j`.
    pub w: Vec<Vec<f64>>,
    pub mode: ConstraintMode,
}

impl FusionWeights {
    /// Starting point: `1/n_m` everywhere for the simplex mode, `1/(n_m·l)`
    /// for the global mode.
    pub fn uniform(n_models: usize, num_classes: usize, mode: ConstraintMode) -> Self {
        let v = match mode {
            ConstraintMode::PerClassSimplex => 1.0 / n_models as f64,
            ConstraintMode::GlobalSums => 1.0 / (n_models * num_classes) as f64,
        };
        FusionWeights { w: vec![vec![v; num_classes]; n_models], mode }
    }

    fn flatten(&self) -> Vec<f64> {
        self.w.iter().flatten().copied().collect()
    }

    fn from_flat(x: &[f64], n_models: usize, num_classes: usize, mode: ConstraintMode) -> Self {
        FusionWeights { w: (0..n_models).map(|i| x[i * num_classes..(i + 1) * num_classes].to_vec()).collect(), mode }
    }

    /// Largest violation of the mode's constraints.
    pub fn residual(&self) -> f64 {
        let n_m = self.w.len();
        let l = self.w.first().map_or(0, |r| r.len());
        match self.mode {
            ConstraintMode::PerClassSimplex => {
                let sums = (0..l).map(|j| ((0..n_m).map(|i| self.w[i][j]).sum::<f64>() - 1.0).abs());
                let negs = self.w.iter().flatten().map(|v| (-v).max(0.0));
                sums.chain(negs).fold(0.0, f64::max)
            }
            ConstraintMode::GlobalSums => (self.w.iter().flatten().sum::<f64>() - 1.0).abs(),
        }
    }
}

/// `argmax_j Σ_i M[i][j]·w[i][j]`, ties to the lowest class.
pub fn fuse_predict(m: &[Vec<f64>], w: &FusionWeights) -> Result<usize> {
    if m.len() != w.w.len() || m.iter().zip(&w.w).any(|(a, b)| a.len() != b.len()) || m.is_empty() {
        return Err(Error::Dimension(format!(
            "prediction matrix is {}×{}, weights {}×{}",
            m.len(),
            m.first().map_or(0, |r| r.len()),
            w.w.len(),
            w.w.first().map_or(0, |r| r.len())
        )));
    }
    let l = m[0].len();
    let scores: Vec<f64> = (0..l).map(|j| m.iter().zip(&w.w).map(|(mi, wi)| mi[j] * wi[j]).sum()).collect();
    Ok(argmax(&scores))
}

pub fn fuse_all(preds: &PredictionSet, w: &FusionWeights) -> Result<Vec<usize>> {
    preds.probs.iter().map(|m| fuse_predict(m, w)).collect()
}

pub fn fused_f1(preds: &PredictionSet, w: &FusionWeights) -> Result<F1Report> {
    f1_scores(&fuse_all(preds, w)?, &preds.labels, preds.num_classes)
}

/// F1 of each model on its own.
pub fn single_model_f1(preds: &PredictionSet) -> Result<Vec<F1Report>> {
    (0..preds.num_models())
        .map(|i| {
            let p: Vec<usize> = preds.probs.iter().map(|m| argmax(&m[i])).collect();
            f1_scores(&p, &preds.labels, preds.num_classes)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub mode: ConstraintMode,
    pub rho_beg: f64,
    pub rho_end: f64,
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { mode: ConstraintMode::PerClassSimplex, rho_beg: 0.2, rho_end: 1e-4, max_evals: 5000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub initial: F1Report,
    pub fitted: F1Report,
    pub per_model: Vec<F1Report>,
    pub evals: usize,
    pub residual: f64,
    /// Fitting could not improve on the initial weights.
    pub no_gain: bool,
}

/// Fits fusion weights maximizing F1-macro on `preds`.
///
/// Equalities enter the optimizer as pairs of opposite inequalities. The
/// returned weights are never worse on `preds` than the uniform start.
pub fn fit_fusion_weights(preds: &PredictionSet, opts: &FitOptions) -> Result<(FusionWeights, FitReport)> {
    if preds.is_empty() {
        return Err(Error::Validation("cannot fit fusion weights on an empty prediction set".into()));
    }
    let n_m = preds.num_models();
    let l = preds.num_classes;
    let mode = opts.mode;
    let init = FusionWeights::uniform(n_m, l, mode);
    let initial = fused_f1(preds, &init)?;

    let mut constraints: Vec<Constraint> = Vec::new();
    match mode {
        ConstraintMode::PerClassSimplex => {
            for j in 0..l {
                let col = move |x: &[f64]| (0..n_m).map(|i| x[i * l + j]).sum::<f64>() - 1.0;
                constraints.push(Box::new(col));
                constraints.push(Box::new(move |x: &[f64]| -col(x)));
            }
            for k in 0..n_m * l {
                constraints.push(Box::new(move |x: &[f64]| x[k]));
            }
        }
        ConstraintMode::GlobalSums => {
            let total = |x: &[f64]| x.iter().sum::<f64>() - 1.0;
            constraints.push(Box::new(total));
            constraints.push(Box::new(move |x: &[f64]| -total(x)));
        }
    }

    let objective = |x: &[f64]| {
        let w = FusionWeights::from_flat(x, n_m, l, mode);
        fused_f1(preds, &w).map(|r| -r.macro_f1).unwrap_or(f64::INFINITY)
    };
    let cobyla = CobylaOptions { rho_beg: opts.rho_beg, rho_end: opts.rho_end, max_evals: opts.max_evals };
    let (weights, evals) = match cobyla_minimize(objective, &constraints, &init.flatten(), &cobyla) {
        Ok(r) => (FusionWeights::from_flat(&r.x, n_m, l, mode), r.evals),
        Err(CobylaError::Infeasible { evals, .. }) => (init.clone(), evals),
        Err(CobylaError::Invalid(e)) => return Err(e),
    };
    let fitted = fused_f1(preds, &weights)?;
    let (weights, fitted) = if fitted.macro_f1 < initial.macro_f1 { (init, initial.clone()) } else { (weights, fitted) };
    let no_gain = fitted.macro_f1 <= initial.macro_f1;
    let residual = weights.residual();
    let report = FitReport { initial, fitted, per_model: single_model_f1(preds)?, evals, residual, no_gain };
    Ok((weights, report))
}
