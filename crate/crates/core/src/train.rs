//! Training loop and evaluation.
//!
//! Training is single-threaded and deterministic: shuffling, cropping and
//! dropout draw from separate streams of the run seed, and batch gradients are
//! reduced in a fixed order.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::loss::{class_weights, ClassWeightSpec};
use crate::metrics::{argmax, f1_scores, F1Report, NUM_CLASSES};
use crate::model::{HeadModel, Utterance};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Frames per second of upstream features.
pub const FRAME_RATE: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Longest training segment in frames; longer utterances are cropped.
    pub crop_frames: usize,
    /// Set from the run seed rather than read from config.
    #[serde(skip)]
    pub seed: u64,
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-5, weight_decay: 0.01, epochs: 20, batch_size: 32, crop_frames: 50, seed: 0, eval_every_epoch: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".into());
        }
        if self.crop_frames == 0 {
            problems.push("crop_frames must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Keeps at most `cap` consecutive frames of `[l×m×h]` features, the same
/// window for every layer. Inputs no longer than `cap` pass through without
/// drawing from `rng`.
pub fn random_crop<R: Rng + ?Sized>(features: &Tensor<f32>, cap: usize, rng: &mut R) -> Result<Tensor<f32>> {
    if cap == 0 {
        return Err(Error::Domain("crop length must be at least 1".into()));
    }
    if features.rank() != 3 {
        return Err(Error::Dimension(format!("crop needs [l×m×h] features, got {:?}", features.dims())));
    }
    let m = features.dims()[1];
    if m <= cap {
        return Ok(features.clone());
    }
    let start = rng.random_range(0..=m - cap);
    features.narrow_frames(start, cap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1_macro: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Parameters from the epoch with the best dev F1-macro (the last epoch
    /// when no dev evaluation ran).
    pub best: HeadModel<f32>,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        /// Best model seen before divergence.
        last_good: Box<HeadModel<f32>>,
        log: Vec<EpochLog>,
    },
    #[error(transparent)]
    Failed(#[from] Error),
}

/// Per-class counts of labels.
pub fn class_histogram(data: &[Utterance]) -> Result<[u64; NUM_CLASSES]> {
    let mut h = [0u64; NUM_CLASSES];
    for u in data {
        if u.label >= NUM_CLASSES {
            return Err(Error::Validation(format!("utterance {} has label {}", u.id, u.label)));
        }
        h[u.label] += 1;
    }
    Ok(h)
}

/// Loss weights for all classes. Classes absent from the training data get
/// weight 1; they never occur as a true label so the value is never applied.
pub fn training_class_weights(model: &HeadModel<f32>, data: &[Utterance]) -> Result<Vec<f64>> {
    let hist = class_histogram(data)?;
    let present: Vec<usize> = (0..NUM_CLASSES).filter(|&c| hist[c] > 0).collect();
    let mut weights = vec![1.0; NUM_CLASSES];
    if present.is_empty() {
        return Ok(weights);
    }
    let spec = ClassWeightSpec::new(present.iter().map(|&c| hist[c]).collect(), model.architecture().class_weights);
    for (c, w) in present.iter().zip(class_weights(&spec)?) {
        weights[*c] = w;
    }
    Ok(weights)
}

/// Trains `model` on `train`, evaluating on `dev` after each epoch.
pub fn train(mut model: HeadModel<f32>, train: &[Utterance], dev: &[Utterance], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()).into());
    }
    let weights = training_class_weights(&model, train)?;
    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut crop_rng = stream(cfg.seed, Stream::Crop);
    let mut dropout_rng = stream(cfg.seed, Stream::Dropout);
    let mut opt = AdamW::new(cfg.optimizer());
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_f1: Option<f64> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let cropped: Vec<Utterance> = chunk
                .iter()
                .map(|&i| {
                    let u = &train[i];
                    Ok(Utterance { features: random_crop(&u.features, cfg.crop_frames, &mut crop_rng)?, ..u.clone() })
                })
                .collect::<Result<_>>()?;
            let batch: Vec<&Utterance> = cropped.iter().collect();

            let mut g = Graph::<f32>::new();
            let bound = model.bind(&mut g, true, &[]);
            let loss = match model.batch_loss(&mut g, &bound, &batch, &weights, Some(&mut dropout_rng)) {
                Ok(v) => v,
                Err(Error::NonFinite(reason)) => {
                    return Err(TrainError::Diverged { epoch, reason, last_good: Box::new(best), log });
                }
                Err(e) => return Err(e.into()),
            };
            let value = g.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, reason: format!("loss {}", value), last_good: Box::new(best), log });
            }
            g.backward(loss)?;
            let grads: BTreeMap<String, Vec<f64>> = bound
                .iter()
                .map(|(name, v)| (name.clone(), g.grad(*v).map(|s| s.iter().map(|x| *x as f64).collect()).unwrap_or_default()))
                .collect();
            match opt.step(model.params_mut(), &grads) {
                Ok(()) => {}
                Err(Error::NonFinite(reason)) => {
                    return Err(TrainError::Diverged { epoch, reason, last_good: Box::new(best), log });
                }
                Err(e) => return Err(e.into()),
            }
            loss_sum += value;
            batches += 1;
        }

        let dev_f1 = if cfg.eval_every_epoch && !dev.is_empty() { Some(evaluate(&model, dev)?.report.macro_f1) } else { None };
        let improved = match (dev_f1, best_f1) {
            (Some(f), Some(b)) => f > b,
            (Some(_), None) => true,
            (None, _) => best_f1.is_none(),
        };
        if improved {
            best = model.clone();
            best_epoch = epoch;
            best_f1 = dev_f1;
        }
        log.push(EpochLog { epoch, train_loss: loss_sum / batches as f64, dev_f1_macro: dev_f1 });
    }
    Ok(TrainOutcome { log, best, best_epoch, best_dev_f1: best_f1 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub references: Vec<usize>,
    /// Softmax class probabilities per utterance.
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub report: F1Report,
}

/// Eval-mode predictions on full, uncropped sequences.
pub fn evaluate(model: &HeadModel<f32>, data: &[Utterance]) -> Result<Evaluation> {
    let mut probabilities = Vec::with_capacity(data.len());
    for u in data {
        probabilities.push(model.predict_proba(u)?);
    }
    let predictions: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let references: Vec<usize> = data.iter().map(|u| u.label).collect();
    let report = f1_scores(&predictions, &references, NUM_CLASSES)?;
    Ok(Evaluation { ids: data.iter().map(|u| u.id.clone()).collect(), references, probabilities, predictions, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(m: usize) -> Tensor<f32> {
        let n = 2 * m * 3;
        Tensor::from_vec(&[2, m, 3], (0..n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn short_inputs_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&seq(10), 20, &mut rng).unwrap(), seq(10));
        assert_eq!(random_crop(&seq(10), 10, &mut rng).unwrap(), seq(10));
        assert!(random_crop(&seq(10), 0, &mut rng).is_err());
    }

    #[test]
    fn crop_is_deterministic_and_aligned() {
        let x = seq(100);
        let a = random_crop(&x, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = random_crop(&x, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), &[2, 50, 3]);
        // layer 1 window starts exactly one layer (100 frames × 3) after layer 0
        let start0 = a.data()[0];
        assert_eq!(a.data()[150], start0 + 300.0);
    }

    #[test]
    fn crop_offsets_cover_the_range() {
        let x = seq(12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 3];
        for _ in 0..200 {
            let c = random_crop(&x, 10, &mut rng).unwrap();
            seen[(c.data()[0] / 3.0) as usize] = true;
        }
        assert_eq!(seen, [true; 3]);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig { lr: 0.0, batch_size: 0, ..Default::default() };
        let msg = alloc::string::ToString::to_string(&bad.validate().unwrap_err());
        assert!(msg.contains("lr") && msg.contains("batch_size"));
    }

    #[test]
    fn training_rejects_empty_set() {
        let arch = Architecture::default().with_dims(2, 3, 16);
        let model = HeadModel::new(arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(train(model, &[], &[], &TrainConfig::default()), Err(TrainError::Failed(_))));
    }
}
