//! Per-class and macro F1.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Emotion classes in label-id order.
pub const EMOTIONS: [&str; 8] = ["Neutral", "Happy", "Angry", "Contempt", "Sad", "Surprise", "Disgust", "Fear"];

pub const NUM_CLASSES: usize = EMOTIONS.len();

#[derive(Clone, Debug, PartialEq)]
pub struct F1Report {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
}

/// `confusion[reference][prediction]` counts.
pub fn confusion_matrix(predictions: &[usize], references: &[usize], m: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != references.len() {
        return Err(Error::Dimension(format!("{} predictions for {} references", predictions.len(), references.len())));
    }
    let mut cm = vec![vec![0u64; m]; m];
    for (&p, &r) in predictions.iter().zip(references) {
        if p >= m || r >= m {
            return Err(Error::Domain(format!("class id {} out of range for {} classes", p.max(r), m)));
        }
        cm[r][p] += 1;
    }
    Ok(cm)
}

/// F1 per class and their unweighted mean over all `m` classes.
///
/// A class with a zero precision+recall denominator scores 0, including a
/// class that is never referenced and never predicted.
pub fn f1_scores(predictions: &[usize], references: &[usize], m: usize) -> Result<F1Report> {
    let cm = confusion_matrix(predictions, references, m)?;
    let per_class: Vec<f64> = (0..m)
        .map(|c| {
            let tp = cm[c][c];
            let predicted: u64 = (0..m).map(|r| cm[r][c]).sum();
            let actual: u64 = cm[c].iter().sum();
            // 2PR/(P+R) with P = tp/predicted, R = tp/actual.
            let denom = predicted + actual;
            if tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = if m == 0 { 0.0 } else { per_class.iter().sum::<f64>() / m as f64 };
    Ok(F1Report { per_class, macro_f1 })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let refs = [0, 1, 2, 3, 4, 5, 6, 7, 3];
        let r = f1_scores(&refs, &refs, 8).unwrap();
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn hand_computed_two_class_case() {
        let r = f1_scores(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.per_class[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1] - 0.8).abs() < 1e-12);
        assert!((r.macro_f1 - 0.733_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_is_poor() {
        let refs: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let preds = vec![0; 80];
        let r = f1_scores(&preds, &refs, 8).unwrap();
        // class 0: P = 1/8, R = 1 -> 2/9; all others 0
        assert!((r.per_class[0] - 2.0 / 9.0).abs() < 1e-12);
        assert!(r.macro_f1 < 0.1);
    }

    #[test]
    fn errors() {
        assert!(matches!(f1_scores(&[0], &[0, 1], 2), Err(Error::Dimension(_))));
        assert!(matches!(f1_scores(&[2], &[0], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }
}
