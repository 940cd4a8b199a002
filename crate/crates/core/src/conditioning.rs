//! Gender and text conditioning of the pooled vector.

use alloc::format;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::pooling::affine_vector;
use crate::tensor::Real;

/// Epsilon inside layer normalization and CLN.
pub const NORM_EPS: f64 = 1e-5;

/// Width of the precomputed sentence embeddings.
pub const TEXT_EMBEDDING_DIM: usize = 384;

/// Conditioning mechanism names as they appear in configuration files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    None,
    Sum,
    SumHalf,
    Multiplication,
    StackLinear,
    Cln,
    SumThird,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 7] = [
        ConditioningMode::None,
        ConditioningMode::Sum,
        ConditioningMode::SumHalf,
        ConditioningMode::Multiplication,
        ConditioningMode::StackLinear,
        ConditioningMode::Cln,
        ConditioningMode::SumThird,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::None => "none",
            ConditioningMode::Sum => "sum",
            ConditioningMode::SumHalf => "sum_half",
            ConditioningMode::Multiplication => "multiplication",
            ConditioningMode::StackLinear => "stack_linear",
            ConditioningMode::Cln => "cln",
            ConditioningMode::SumThird => "sum_third",
        }
    }

    /// Valid as a gender-only mechanism.
    pub fn is_gender_mode(self) -> bool {
        !matches!(self, ConditioningMode::SumThird)
    }

    /// Valid as a joint gender+text mechanism.
    pub fn is_text_mode(self) -> bool {
        matches!(self, ConditioningMode::SumThird | ConditioningMode::Multiplication | ConditioningMode::Cln)
    }
}

/// Weight `[n×k]` and bias `[k]` of an affine map.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub weight: Var,
    pub bias: Var,
}

impl Affine {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        affine_vector(g, x, self.weight, self.bias)
    }
}

/// Conditional layer norm: `f(c) ⊙ normalize(x) + g(c)`.
#[derive(Clone, Copy, Debug)]
pub struct Cln {
    pub scale: Affine,
    pub shift: Affine,
}

/// Gender conditioning with the parameters it needs.
#[derive(Clone, Copy, Debug)]
pub enum GenderOp {
    None,
    Sum,
    SumHalf,
    Multiplication,
    StackLinear(Affine),
    Cln(Cln),
}

/// Joint gender + text conditioning with its parameters.
#[derive(Clone, Copy, Debug)]
pub enum TextOp {
    SumThird,
    Multiplication,
    /// `reduce` maps `[e_gender; F(e_text)]` (length `2q`) back to `q`.
    Cln {
        reduce: Affine,
        cln: Cln,
    },
}

/// Text projector `F`: affine, layer norm, ReLU, dropout.
#[derive(Clone, Copy, Debug)]
pub struct TextProjector {
    pub linear: Affine,
    pub gain: Var,
    pub bias: Var,
    pub dropout: f64,
}

fn same_len<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<usize> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.rank() != 1 || sb.rank() != 1 || sa.numel() != sb.numel() {
        return Err(Error::Dimension(format!("{}: {} vs {}", what, sa, sb)));
    }
    Ok(sa.numel())
}

/// `(x - mean(x)) / sqrt(var(x) + eps)` over the entries of a vector.
pub fn normalize<T: Real>(g: &mut Graph<T>, x: Var, eps: f64) -> Result<Var> {
    let q = g.shape(x).numel();
    if g.shape(x).rank() != 1 || q == 0 {
        return Err(Error::Dimension(format!("normalize needs a non-empty vector, got {}", g.shape(x))));
    }
    let col = g.reshape(x, &[q, 1])?;
    let mean = g.mean_frames(col)?;
    let var = g.var_frames(col)?;
    let centered = g.sub(x, mean)?;
    let denom = g.add_scalar(var, eps)?;
    let denom = g.sqrt(denom)?;
    g.div(centered, denom)
}

/// Layer normalization with trainable gain and bias.
pub fn layer_norm<T: Real>(g: &mut Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = normalize(g, x, NORM_EPS)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

/// Conditional layer normalization of `x` by the condition vector `c`.
pub fn cln<T: Real>(g: &mut Graph<T>, x: Var, c: Var, p: &Cln) -> Result<Var> {
    let q = g.shape(x).numel();
    let n = normalize(g, x, NORM_EPS)?;
    let scale = p.scale.apply(g, c)?;
    let shift = p.shift.apply(g, c)?;
    if g.shape(scale).numel() != q || g.shape(shift).numel() != q {
        return Err(Error::Dimension(format!("CLN maps produce {} / {} values for q = {}", g.shape(scale), g.shape(shift), q)));
    }
    let y = g.mul(scale, n)?;
    g.add(y, shift)
}

/// Applies a gender-only conditioning mechanism to the pooled vector.
pub fn gender_condition<T: Real>(g: &mut Graph<T>, x: Var, e: Var, op: &GenderOp) -> Result<Var> {
    let q = same_len(g, x, e, "gender conditioning")?;
    match op {
        GenderOp::None => Ok(x),
        GenderOp::Sum => g.add(x, e),
        GenderOp::SumHalf => {
            let s = g.add(x, e)?;
            g.scale(s, 0.5)
        }
        GenderOp::Multiplication => g.mul(x, e),
        GenderOp::StackLinear(map) => {
            let stacked = g.concat(x, e)?;
            let y = map.apply(g, stacked)?;
            if g.shape(y).numel() != q {
                return Err(Error::Dimension(format!("stack_linear maps to {} for q = {}", g.shape(y), q)));
            }
            Ok(y)
        }
        GenderOp::Cln(p) => cln(g, x, e, p),
    }
}

/// Runs `F` on a raw text embedding. `rng == None` disables dropout.
pub fn project_text<T: Real, R: Rng + ?Sized>(g: &mut Graph<T>, e_text: Var, tp: &TextProjector, rng: Option<&mut R>) -> Result<Var> {
    let h = tp.linear.apply(g, e_text)?;
    let h = layer_norm(g, h, tp.gain, tp.bias)?;
    let h = g.relu(h)?;
    g.dropout(h, tp.dropout, rng)
}

/// Combines the pooled vector with the gender embedding and the projected
/// text embedding `f_text = F(e_text)`.
pub fn text_condition<T: Real>(g: &mut Graph<T>, x: Var, e_gender: Var, f_text: Var, op: &TextOp) -> Result<Var> {
    same_len(g, x, e_gender, "text conditioning (gender)")?;
    same_len(g, x, f_text, "text conditioning (text)")?;
    match op {
        TextOp::SumThird => {
            let s = g.add(x, e_gender)?;
            let s = g.add(s, f_text)?;
            g.scale(s, 1.0 / 3.0)
        }
        TextOp::Multiplication => {
            let y = g.mul(x, e_gender)?;
            g.mul(y, f_text)
        }
        TextOp::Cln { reduce, cln: p } => {
            let joint = g.concat(e_gender, f_text)?;
            let c = reduce.apply(g, joint)?;
            cln(g, x, c, p)
        }
    }
}
