//! Head model: architecture descriptor, parameters and the forward pass
//! aggregate → project → pool → condition → classify.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check_at, Graph, Var};
use crate::conditioning::{
    gender_condition, project_text, text_condition, Affine, Cln, ConditioningMode, GenderOp, TextOp, TextProjector, TEXT_EMBEDDING_DIM,
};
use crate::error::{Error, Result};
use crate::loss::{smooth_labels, weighted_cross_entropy, ClassWeightMode, Reduction};
use crate::metrics::NUM_CLASSES;
use crate::pooling::{affine_vector, layer_aggregate, pool, project_frames, AttentionMode, LayerWeightMode, PoolingKind};
use crate::tensor::{Real, Tensor};

/// Projection widths the head accepts.
pub const PROJECTION_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

/// Everything that determines the parameter set and the loss of a head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub num_layers: usize,
    pub hidden: usize,
    /// Width `d` of the framewise projection.
    pub projection: usize,
    pub layer_weights: LayerWeightMode,
    pub pooling: PoolingKind,
    pub attention_mode: AttentionMode,
    pub gender_conditioning: ConditioningMode,
    /// When not `none`, must equal `gender_conditioning`.
    pub text_conditioning: ConditioningMode,
    pub text_dim: usize,
    pub text_dropout: f64,
    pub label_smoothing: f64,
    pub class_weights: ClassWeightMode,
    pub reduction: Reduction,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            num_layers: 4,
            hidden: 32,
            projection: 256,
            layer_weights: LayerWeightMode::Softmax,
            pooling: PoolingKind::Std,
            attention_mode: AttentionMode::PaperLiteral,
            gender_conditioning: ConditioningMode::None,
            text_conditioning: ConditioningMode::None,
            text_dim: TEXT_EMBEDDING_DIM,
            text_dropout: 0.1,
            label_smoothing: 0.0,
            class_weights: ClassWeightMode::InverseFrequency,
            reduction: Reduction::WeightedMean,
        }
    }
}

impl Architecture {
    /// The five ensemble members used for fusion, numbered 1 to 5.
    ///
    /// 1: attention pooling, d = 256. 2: std pooling, d = 32. 3: std pooling,
    /// d = 256, multiplicative gender conditioning. 4: as 3 with gender and
    /// text averaged in. 5: as 4 with label smoothing 0.1.
    pub fn preset(index: usize) -> Result<Architecture> {
        let base = Architecture::default();
        let arch = match index {
            1 => Architecture { pooling: PoolingKind::Attention, projection: 256, ..base },
            2 => Architecture { pooling: PoolingKind::Std, projection: 32, ..base },
            3 => Architecture { gender_conditioning: ConditioningMode::Multiplication, ..base },
            4 => Architecture { gender_conditioning: ConditioningMode::SumThird, text_conditioning: ConditioningMode::SumThird, ..base },
            5 => Architecture {
                gender_conditioning: ConditioningMode::SumThird,
                text_conditioning: ConditioningMode::SumThird,
                label_smoothing: 0.1,
                ..base
            },
            _ => return Err(Error::Validation(format!("no preset model {}; presets are 1 to 5", index))),
        };
        Ok(arch)
    }

    /// Desk-sized copy: same mechanisms, smaller dimensions.
    pub fn with_dims(mut self, num_layers: usize, hidden: usize, projection: usize) -> Architecture {
        self.num_layers = num_layers;
        self.hidden = hidden;
        self.projection = projection;
        self
    }

    pub fn pooled_size(&self) -> usize {
        self.pooling.output_size(self.projection)
    }

    pub fn uses_text(&self) -> bool {
        self.text_conditioning != ConditioningMode::None
    }

    pub fn uses_gender(&self) -> bool {
        self.gender_conditioning != ConditioningMode::None
    }

    /// Field-level validation; every problem is reported.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.num_layers == 0 {
            problems.push("num_layers must be at least 1".into());
        }
        if self.hidden == 0 {
            problems.push("hidden must be at least 1".into());
        }
        if !PROJECTION_SIZES.contains(&self.projection) {
            problems.push(format!("projection must be one of {:?}, got {}", PROJECTION_SIZES, self.projection));
        }
        if self.text_dim == 0 {
            problems.push("text_dim must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.text_dropout) {
            problems.push(format!("text_dropout must be in [0, 1), got {}", self.text_dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            problems.push(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        if self.uses_text() {
            if !self.text_conditioning.is_text_mode() {
                problems.push(format!(
                    "text_conditioning must be none, sum_third, multiplication or cln, got {}",
                    self.text_conditioning.as_str()
                ));
            }
            if self.gender_conditioning != self.text_conditioning {
                problems.push(format!(
                    "with text conditioning, gender_conditioning must match it ({}), got {}",
                    self.text_conditioning.as_str(),
                    self.gender_conditioning.as_str()
                ));
            }
        } else if !self.gender_conditioning.is_gender_mode() {
            problems.push(format!(
                "gender_conditioning {} requires text_conditioning {}",
                self.gender_conditioning.as_str(),
                self.gender_conditioning.as_str()
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    /// Name and shape of every parameter tensor, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (l, h, d, q, c) = (self.num_layers, self.hidden, self.projection, self.pooled_size(), NUM_CLASSES);
        let mut out: Vec<(String, Vec<usize>)> =
            vec![("layer_weights".into(), vec![l]), ("projection.weight".into(), vec![h, d]), ("projection.bias".into(), vec![d])];
        if self.pooling == PoolingKind::Attention {
            out.push(("attention.probe".into(), vec![d]));
        }
        if self.uses_gender() {
            out.push(("gender.embedding".into(), vec![2, q]));
        }
        let cln = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
            for part in ["scale", "shift"] {
                out.push((format!("{}.{}.weight", prefix, part), vec![q, q]));
                out.push((format!("{}.{}.bias", prefix, part), vec![q]));
            }
        };
        if self.uses_text() {
            out.push(("text.linear.weight".into(), vec![self.text_dim, q]));
            out.push(("text.linear.bias".into(), vec![q]));
            out.push(("text.norm.gain".into(), vec![q]));
            out.push(("text.norm.bias".into(), vec![q]));
            if self.text_conditioning == ConditioningMode::Cln {
                out.push(("text.reduce.weight".into(), vec![2 * q, q]));
                out.push(("text.reduce.bias".into(), vec![q]));
                cln("text.cln", &mut out);
            }
        } else {
            match self.gender_conditioning {
                ConditioningMode::StackLinear => {
                    out.push(("gender.stack.weight".into(), vec![2 * q, q]));
                    out.push(("gender.stack.bias".into(), vec![q]));
                }
                ConditioningMode::Cln => cln("gender.cln", &mut out),
                _ => {}
            }
        }
        out.push(("classifier.weight".into(), vec![q, c]));
        out.push(("classifier.bias".into(), vec![c]));
        out
    }
}

/// One utterance of precomputed upstream features with its side information.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[layers × frames × hidden]`.
    pub features: Tensor<f32>,
    /// 0 or 1.
    pub gender: u8,
    pub text: Tensor<f32>,
    pub label: usize,
}

/// Trainable head parameters together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel<T: Real = f32> {
    arch: Architecture,
    params: BTreeMap<String, Tensor<T>>,
}

/// Graph variables of every parameter of a model.
pub type Bound = BTreeMap<String, Var>;

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, dims: &[usize], bound: f64) -> Result<Tensor<T>> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(dims, data)
}

impl<T: Real> HeadModel<T> {
    /// Fresh parameters. Linear maps use `U(±1/√fan_in)`, gender embeddings
    /// `U(±0.1)`, layer weights start uniform and norm gains at one.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.parameter_shapes();
        let fan_in = |name: &str, dims: &[usize]| -> usize {
            let weight = name.strip_suffix(".bias").map(|p| format!("{}.weight", p));
            match weight.and_then(|w| shapes.iter().find(|(n, _)| *n == w)) {
                Some((_, wd)) => wd[0],
                None => dims[0],
            }
        };
        let mut params = BTreeMap::new();
        for (name, dims) in shapes.iter().cloned() {
            let t = if name == "layer_weights" {
                let v = match arch.layer_weights {
                    LayerWeightMode::Softmax => 0.0,
                    LayerWeightMode::Raw => 1.0 / arch.num_layers as f64,
                };
                Tensor::full(&dims, T::from_f64(v))?
            } else if name == "gender.embedding" {
                uniform(rng, &dims, 0.1)?
            } else if name == "text.norm.gain" {
                Tensor::full(&dims, T::from_f64(1.0))?
            } else if name == "text.norm.bias" {
                Tensor::zeros(&dims)?
            } else {
                uniform(rng, &dims, 1.0 / libm::sqrt(fan_in(&name, &dims) as f64))?
            };
            params.insert(name, t);
        }
        Ok(HeadModel { arch, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(arch: Architecture, mut params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let mut out = BTreeMap::new();
        for (name, dims) in arch.parameter_shapes() {
            let t = params.remove(&name).ok_or_else(|| Error::Validation(format!("missing parameter {}", name)))?;
            if t.dims() != &dims[..] {
                return Err(Error::Dimension(format!("parameter {} has shape {:?}, expected {:?}", name, t.dims(), dims)));
            }
            out.insert(name, t);
        }
        if let Some(extra) = params.keys().next() {
            return Err(Error::Validation(format!("unexpected parameter {}", extra)));
        }
        Ok(HeadModel { arch, params: out })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> HeadModel<U> {
        HeadModel { arch: self.arch.clone(), params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Puts every parameter on the graph. `overrides` replaces the named
    /// parameters with existing variables.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, overrides: &[(&str, Var)]) -> Bound {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = match overrides.iter().find(|(n, _)| n == name) {
                    Some((_, v)) => *v,
                    None if trainable => g.param(t.clone()),
                    None => g.constant(t.clone()),
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Class logits `[8]` for one utterance. `rng == None` is eval mode.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, bound: &Bound, utt: &Utterance, rng: Option<&mut R>) -> Result<Var> {
        let a = &self.arch;
        let p = |name: &str| -> Result<Var> {
            bound.get(name).copied().ok_or_else(|| Error::Contract(format!("parameter {} is not bound", name)))
        };
        let affine = |prefix: &str| -> Result<Affine> {
            Ok(Affine { weight: p(&format!("{}.weight", prefix))?, bias: p(&format!("{}.bias", prefix))? })
        };
        let cln = |prefix: &str| -> Result<Cln> {
            Ok(Cln { scale: affine(&format!("{}.scale", prefix))?, shift: affine(&format!("{}.shift", prefix))? })
        };

        let fd = utt.features.dims();
        if fd.len() != 3 || fd[0] != a.num_layers || fd[2] != a.hidden {
            return Err(Error::Dimension(format!(
                "utterance {} has features {:?}, model expects [{}, m, {}]",
                utt.id, fd, a.num_layers, a.hidden
            )));
        }
        let z = g.constant(utt.features.cast());
        let agg = layer_aggregate(g, z, p("layer_weights")?, a.layer_weights)?;
        let x = project_frames(g, agg, p("projection.weight")?, p("projection.bias")?)?;
        let probe = if a.pooling == PoolingKind::Attention { Some(p("attention.probe")?) } else { None };
        let pooled = pool(g, x, a.pooling, probe, a.attention_mode)?;

        let conditioned = if a.uses_text() || a.uses_gender() {
            if utt.gender > 1 {
                return Err(Error::Validation(format!("utterance {} has gender id {}", utt.id, utt.gender)));
            }
            let table = p("gender.embedding")?;
            let e = g.row(table, utt.gender as usize)?;
            if a.uses_text() {
                if utt.text.dims() != [a.text_dim] {
                    return Err(Error::Dimension(format!(
                        "utterance {} has text embedding {:?}, expected [{}]",
                        utt.id,
                        utt.text.dims(),
                        a.text_dim
                    )));
                }
                let tp = TextProjector {
                    linear: affine("text.linear")?,
                    gain: p("text.norm.gain")?,
                    bias: p("text.norm.bias")?,
                    dropout: a.text_dropout,
                };
                let raw = g.constant(utt.text.cast());
                let f = project_text(g, raw, &tp, rng)?;
                let op = match a.text_conditioning {
                    ConditioningMode::SumThird => TextOp::SumThird,
                    ConditioningMode::Multiplication => TextOp::Multiplication,
                    ConditioningMode::Cln => TextOp::Cln { reduce: affine("text.reduce")?, cln: cln("text.cln")? },
                    other => return Err(Error::Validation(format!("unknown text conditioning {}", other.as_str()))),
                };
                text_condition(g, pooled, e, f, &op)?
            } else {
                let op = match a.gender_conditioning {
                    ConditioningMode::Sum => GenderOp::Sum,
                    ConditioningMode::SumHalf => GenderOp::SumHalf,
                    ConditioningMode::Multiplication => GenderOp::Multiplication,
                    ConditioningMode::StackLinear => GenderOp::StackLinear(affine("gender.stack")?),
                    ConditioningMode::Cln => GenderOp::Cln(cln("gender.cln")?),
                    other => return Err(Error::Validation(format!("unknown gender conditioning {}", other.as_str()))),
                };
                gender_condition(g, pooled, e, &op)?
            }
        } else {
            pooled
        };
        affine_vector(g, conditioned, p("classifier.weight")?, p("classifier.bias")?)
    }

    /// Smoothed, class-weighted cross-entropy over a batch.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        batch: &[&Utterance],
        class_weights: &[f64],
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for utt in batch {
            logits.push(self.forward(g, bound, utt, rng.as_deref_mut())?);
            targets.push(smooth_labels(utt.label, NUM_CLASSES, self.arch.label_smoothing)?);
        }
        let stacked = g.stack(&logits)?;
        weighted_cross_entropy(g, stacked, &targets, class_weights, self.arch.reduction)
    }

    /// Class probabilities for one utterance in eval mode.
    pub fn predict_proba(&self, utt: &Utterance) -> Result<Vec<f64>> {
        let mut g = Graph::<T>::new();
        let bound = self.bind(&mut g, false, &[]);
        let logits = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, &bound, utt, None)?;
        let probs = g.softmax(logits)?;
        Ok(g.value(probs).to_f64_vec())
    }
}

/// Top-level component a parameter belongs to (`projection`, `gender`, ...).
pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Largest gradient error of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub parameter: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Checks reverse-mode gradients of the full batch loss against central
/// differences for every parameter tensor, in `f64`, with dropout off.
///
/// At most `max_coords` entries per tensor are probed, chosen with `rng`.
pub fn model_gradcheck<R: Rng + ?Sized>(
    model: &HeadModel<f64>,
    batch: &[&Utterance],
    class_weights: &[f64],
    eps: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<Vec<GradcheckEntry>> {
    let mut out = Vec::new();
    for (name, tensor) in model.params() {
        let n = tensor.numel();
        let indices: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            for i in 0..max_coords {
                let j = rng.random_range(i..n);
                all.swap(i, j);
            }
            let mut pick = all[..max_coords].to_vec();
            pick.sort_unstable();
            pick
        };
        let err = finite_diff_check_at(
            |g, v| {
                let bound = model.bind(g, false, &[(name.as_str(), v)]);
                model.batch_loss::<rand_chacha::ChaCha8Rng>(g, &bound, batch, class_weights, None)
            },
            tensor,
            eps,
            &indices,
        )?;
        out.push(GradcheckEntry { parameter: name.to_string(), checked: indices.len(), max_rel_error: err });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn utterance(rng: &mut impl Rng, arch: &Architecture, m: usize, label: usize) -> Utterance {
        let n = arch.num_layers * m * arch.hidden;
        Utterance {
            id: format!("u{}", label),
            features: Tensor::from_vec(&[arch.num_layers, m, arch.hidden], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            gender: (label % 2) as u8,
            text: Tensor::vector((0..arch.text_dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            label,
        }
    }

    #[test]
    fn presets_validate() {
        for i in 1..=5 {
            let a = Architecture::preset(i).unwrap();
            a.validate().unwrap();
        }
        assert!(Architecture::preset(0).is_err());
        assert!(Architecture::preset(6).is_err());
        assert_eq!(Architecture::preset(2).unwrap().pooled_size(), 64);
        assert_eq!(Architecture::preset(1).unwrap().pooling, PoolingKind::Attention);
        assert_eq!(Architecture::preset(5).unwrap().label_smoothing, 0.1);
    }

    #[test]
    fn validation_reports_every_problem() {
        let bad = Architecture { projection: 20, label_smoothing: 1.0, ..Default::default() };
        let msg = alloc::string::ToString::to_string(&bad.validate().unwrap_err());
        assert!(msg.contains("projection") && msg.contains("label_smoothing"), "{}", msg);
        let mixed = Architecture {
            gender_conditioning: ConditioningMode::Sum,
            text_conditioning: ConditioningMode::SumThird,
            ..Default::default()
        };
        assert!(mixed.validate().is_err());
        let orphan = Architecture { gender_conditioning: ConditioningMode::SumThird, ..Default::default() };
        assert!(orphan.validate().is_err());
        let bad_text =
            Architecture { gender_conditioning: ConditioningMode::Sum, text_conditioning: ConditioningMode::Sum, ..Default::default() };
        assert!(bad_text.validate().is_err());
    }

    #[test]
    fn parameter_shapes_are_consistent() {
        let mut rng = stream(1, Stream::Init);
        for g in ConditioningMode::ALL {
            let text = if g.is_text_mode() { [ConditioningMode::None, g] } else { [ConditioningMode::None; 2] };
            for t in text {
                let arch = Architecture { gender_conditioning: g, text_conditioning: t, ..Default::default() }.with_dims(2, 8, 16);
                if arch.validate().is_err() {
                    continue;
                }
                let model = HeadModel::<f32>::new(arch.clone(), &mut rng).unwrap();
                let rebuilt = HeadModel::from_params(arch.clone(), model.params().clone()).unwrap();
                assert_eq!(rebuilt, model);
                let utt = utterance(&mut rng, &arch, 5, 3);
                let p = model.predict_proba(&utt).unwrap();
                assert_eq!(p.len(), NUM_CLASSES);
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn from_params_rejects_mismatches() {
        let mut rng = stream(2, Stream::Init);
        let arch = Architecture::default().with_dims(2, 8, 16);
        let model = HeadModel::<f32>::new(arch.clone(), &mut rng).unwrap();
        let mut params = model.params().clone();
        params.insert("classifier.bias".into(), Tensor::vector(vec![0.0; 7]));
        assert!(matches!(HeadModel::from_params(arch.clone(), params), Err(Error::Dimension(_))));
        let mut params = model.params().clone();
        params.remove("projection.weight");
        assert!(HeadModel::from_params(arch.clone(), params).is_err());
        let mut params = model.params().clone();
        params.insert("extra".into(), Tensor::vector(vec![0.0]));
        assert!(HeadModel::from_params(arch, params).is_err());
    }

    #[test]
    fn forward_rejects_wrong_feature_shape() {
        let mut rng = stream(3, Stream::Init);
        let arch = Architecture::default().with_dims(2, 8, 16);
        let model = HeadModel::<f32>::new(arch.clone(), &mut rng).unwrap();
        let other = Architecture::default().with_dims(3, 8, 16);
        let utt = utterance(&mut rng, &other, 4, 0);
        assert!(matches!(model.predict_proba(&utt), Err(Error::Dimension(_))));
    }

    #[test]
    fn small_model_gradcheck() {
        let mut rng = stream(4, Stream::Gradcheck);
        for i in 1..=5 {
            let arch = Architecture::preset(i).unwrap().with_dims(2, 6, 16);
            let model = HeadModel::<f64>::new(arch.clone(), &mut rng).unwrap();
            let utts: Vec<Utterance> = (0..3).map(|k| utterance(&mut rng, &arch, 4 + k, k * 3)).collect();
            let batch: Vec<&Utterance> = utts.iter().collect();
            let weights = [1.0, 0.5, 2.0, 1.5, 0.7, 1.1, 0.9, 1.3];
            let report = model_gradcheck(&model, &batch, &weights, 1e-6, 12, &mut rng).unwrap();
            for e in report {
                assert!(e.max_rel_error < 1e-4, "model {} {} err {}", i, e.parameter, e.max_rel_error);
            }
        }
    }
}
