//! Class-conditional Gaussian stand-in for upstream features.
//!
//! Every class owns a random unit direction in feature space and another in
//! text-embedding space. Frames are `delta · direction + sigma · noise`, the
//! same direction in every layer; text embeddings follow the same recipe.

use std::fs;
use std::path::Path;

use emohead_core::conditioning::TEXT_EMBEDDING_DIM;
use emohead_core::metrics::NUM_CLASSES;
use emohead_core::model::Utterance;
use emohead_core::rng::{stream, Stream};
use emohead_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{write_manifest, ManifestRecord};
use crate::tensor_file::write_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_layers: usize,
    pub hidden: usize,
    pub text_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Utterances per class in the training split.
    pub train_counts: Vec<u64>,
    pub dev_counts: Vec<u64>,
    /// Norm of each class mean.
    pub delta: f64,
    pub sigma: f64,
    /// Per-class shift of the probability of gender 1 away from 0.5. Empty
    /// means no bias.
    pub gender_bias: Vec<f64>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_layers: 4,
            hidden: 32,
            text_dim: TEXT_EMBEDDING_DIM,
            min_frames: 30,
            max_frames: 80,
            train_counts: vec![80, 50, 25, 10, 30, 20, 10, 10],
            dev_counts: vec![10; NUM_CLASSES],
            delta: 5.0,
            sigma: 1.0,
            gender_bias: Vec::new(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Balanced split sizes.
    pub fn balanced(train_per_class: u64, dev_per_class: u64) -> Self {
        SyntheticSpec {
            train_counts: vec![train_per_class; NUM_CLASSES],
            dev_counts: vec![dev_per_class; NUM_CLASSES],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        for (name, v) in [("num_layers", self.num_layers), ("hidden", self.hidden), ("text_dim", self.text_dim)] {
            if v == 0 {
                p.push(format!("data.{} must be at least 1", name));
            }
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            p.push(format!("data frame range [{}, {}] is empty or starts at 0", self.min_frames, self.max_frames));
        }
        for (name, counts) in [("train_counts", &self.train_counts), ("dev_counts", &self.dev_counts)] {
            if counts.len() != NUM_CLASSES {
                p.push(format!("data.{} needs {} entries, got {}", name, NUM_CLASSES, counts.len()));
            }
            if counts.contains(&0) {
                p.push(format!("data.{} entries must be positive", name));
            }
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            p.push(format!("data.delta must be non-negative, got {}", self.delta));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            p.push(format!("data.sigma must be positive, got {}", self.sigma));
        }
        if !self.gender_bias.is_empty() {
            if self.gender_bias.len() != NUM_CLASSES {
                p.push(format!("data.gender_bias needs 0 or {} entries", NUM_CLASSES));
            }
            if self.gender_bias.iter().any(|b| !(-0.5..=0.5).contains(b)) {
                p.push("data.gender_bias entries must lie in [-0.5, 0.5]".into());
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

pub struct SyntheticData {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
}

fn unit_direction<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

/// Generates both splits in memory; a pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::Data);
    let feature_means: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|_| unit_direction(&mut rng, spec.hidden)).collect();
    let text_means: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|_| unit_direction(&mut rng, spec.text_dim)).collect();

    let mut split = |name: &str, counts: &[u64]| -> Result<Vec<Utterance>> {
        let mut out = Vec::new();
        for (c, &count) in counts.iter().enumerate() {
            let p_gender = 0.5 + spec.gender_bias.get(c).copied().unwrap_or(0.0);
            for k in 0..count {
                let m = rng.random_range(spec.min_frames..=spec.max_frames);
                let gender = u8::from(rng.random::<f64>() < p_gender);
                let mut feats = Vec::with_capacity(spec.num_layers * m * spec.hidden);
                for _ in 0..spec.num_layers * m {
                    for mean in &feature_means[c] {
                        let noise: f64 = rng.sample(StandardNormal);
                        feats.push((spec.delta * mean + spec.sigma * noise) as f32);
                    }
                }
                let text: Vec<f32> = text_means[c]
                    .iter()
                    .map(|mean| {
                        let noise: f64 = rng.sample(StandardNormal);
                        (spec.delta * mean + spec.sigma * noise) as f32
                    })
                    .collect();
                out.push(Utterance {
                    id: format!("{}_{}_{:04}", name, c, k),
                    features: Tensor::from_vec(&[spec.num_layers, m, spec.hidden], feats)?,
                    gender,
                    text: Tensor::vector(text),
                    label: c,
                });
            }
        }
        Ok(out)
    };
    let train = split("train", &spec.train_counts)?;
    let dev = split("dev", &spec.dev_counts)?;
    Ok(SyntheticData { train, dev })
}

fn write_split(out_dir: &Path, name: &str, utts: &[Utterance]) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let feature_path = format!("features/{}.sert", u.id);
        let text_embedding_path = format!("text/{}.sert", u.id);
        write_tensor(&u.features, out_dir.join(&feature_path))?;
        write_tensor(&u.text, out_dir.join(&text_embedding_path))?;
        records.push(ManifestRecord { id: u.id.clone(), feature_path, gender_id: u.gender, label_id: u.label, text_embedding_path });
    }
    write_manifest(out_dir.join(format!("{}.jsonl", name)), &records)?;
    Ok(records)
}

/// Writes tensors under `features/` and `text/` plus `train.jsonl` and
/// `dev.jsonl` into `out_dir`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    let out_dir = out_dir.as_ref();
    let data = generate(spec)?;
    for sub in ["features", "text"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let train = write_split(out_dir, "train", &data.train)?;
    let dev = write_split(out_dir, "dev", &data.dev)?;
    Ok((train, dev))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            hidden: 4,
            text_dim: 3,
            min_frames: 2,
            max_frames: 5,
            train_counts: vec![3, 1, 1, 1, 1, 1, 1, 2],
            dev_counts: vec![1; 8],
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn histogram_matches_counts() {
        let d = generate(&small()).unwrap();
        let mut h = [0u64; 8];
        d.train.iter().for_each(|u| h[u.label] += 1);
        assert_eq!(h.to_vec(), small().train_counts);
        assert!(d.train.iter().all(|u| (2..=5).contains(&u.features.dims()[1])));
    }

    #[test]
    fn pure_function_of_spec() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train, b.train);
        let c = generate(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn validation_collects_problems() {
        let bad = SyntheticSpec { train_counts: vec![1; 3], sigma: 0.0, ..small() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("train_counts") && msg.contains("sigma"), "{}", msg);
    }
}
