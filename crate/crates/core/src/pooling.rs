//! Layer aggregation, framewise projection and temporal pooling.
//!
//! All functions operate on graph variables so they are differentiable in
//! both their inputs and their parameters.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, SQRT_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// How the trainable layer weights are turned into mixing coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeightMode {
    /// Use `w` as is.
    Raw,
    /// Use `softmax(w)`: positive weights summing to one.
    #[default]
    Softmax,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Average,
    #[default]
    Std,
    Attention,
}

impl PoolingKind {
    /// Pooled vector length for frames of width `d`.
    pub fn output_size(self, d: usize) -> usize {
        match self {
            PoolingKind::Average => d,
            PoolingKind::Std | PoolingKind::Attention => 2 * d,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Scale every frame by its attention weight, then take plain
    /// mean/std over the scaled frames.
    #[default]
    PaperLiteral,
    /// Attention-weighted mean and standard deviation.
    AttentiveStats,
}

/// Collapses `z: [l×m×h]` to `[m×h]` with per-layer weights `w: [l]`.
pub fn layer_aggregate<T: Real>(g: &mut Graph<T>, z: Var, w: Var, mode: LayerWeightMode) -> Result<Var> {
    let zs = g.shape(z);
    let ws = g.shape(w);
    if zs.rank() != 3 {
        return Err(Error::Dimension(format!("upstream features must be [l×m×h], got {}", zs)));
    }
    let (l, m, h) = (zs.dims()[0], zs.dims()[1], zs.dims()[2]);
    if ws.rank() != 1 || ws.numel() != l {
        return Err(Error::Dimension(format!("{} layers but layer weights {}", l, ws)));
    }
    let eff = match mode {
        LayerWeightMode::Raw => w,
        LayerWeightMode::Softmax => g.softmax(w)?,
    };
    let eff = g.reshape(eff, &[1, l])?;
    let flat = g.reshape(z, &[l, m * h])?;
    let mixed = g.matmul(eff, flat)?;
    g.reshape(mixed, &[m, h])
}

/// Per-frame affine map `x·W + b` for `x: [m×h]`, `W: [h×d]`, `b: [d]`.
pub fn project_frames<T: Real>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, weight)?;
    let (d, bs) = (g.shape(y).last(), g.shape(bias));
    if bs.rank() != 1 || bs.numel() != d {
        return Err(Error::Dimension(format!("projection bias {} for output width {}", bs, d)));
    }
    g.add(y, bias)
}

/// Affine map of a single vector: `x: [n]`, `W: [n×k]`, `b: [k]` → `[k]`.
pub fn affine_vector<T: Real>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let n = g.shape(x).numel();
    if g.shape(x).rank() != 1 {
        return Err(Error::Dimension(format!("affine_vector needs a vector, got {}", g.shape(x))));
    }
    let row = g.reshape(x, &[1, n])?;
    let y = g.matmul(row, weight)?;
    let k = g.shape(y).last();
    let y = g.reshape(y, &[k])?;
    g.add(y, bias)
}

fn check_frames<T: Real>(g: &Graph<T>, x: Var) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.rank() != 2 {
        return Err(Error::Dimension(format!("pooling needs [m×d] frames, got {}", s)));
    }
    if s.dims()[0] == 0 {
        return Err(Error::Dimension("pooling over zero frames".into()));
    }
    Ok((s.dims()[0], s.dims()[1]))
}

/// Framewise mean: `[m×d] -> [d]`.
pub fn average_pool<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    check_frames(g, x)?;
    g.mean_frames(x)
}

/// Concatenated framewise mean and population standard deviation: `[m×d] -> [2d]`.
pub fn std_pool<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    check_frames(g, x)?;
    let mean = g.mean_frames(x)?;
    let var = g.var_frames(x)?;
    let std = g.sqrt_floored(var, SQRT_FLOOR)?;
    g.concat(mean, std)
}

/// Softmax over frames of `tanh(x)·p`.
pub fn attention_weights<T: Real>(g: &mut Graph<T>, x: Var, p: Var) -> Result<Var> {
    let (m, d) = check_frames(g, x)?;
    let ps = g.shape(p);
    if ps.rank() != 1 || ps.numel() != d {
        return Err(Error::Dimension(format!("attention probe {} for frames of width {}", ps, d)));
    }
    let t = g.tanh(x)?;
    let pc = g.reshape(p, &[d, 1])?;
    let scores = g.matmul(t, pc)?;
    let scores = g.reshape(scores, &[m])?;
    g.softmax(scores)
}

/// Attention pooling: `[m×d] -> [2d]`.
pub fn attention_pool<T: Real>(g: &mut Graph<T>, x: Var, p: Var, mode: AttentionMode) -> Result<Var> {
    let (m, _) = check_frames(g, x)?;
    let w = attention_weights(g, x, p)?;
    match mode {
        AttentionMode::PaperLiteral => {
            let scaled = g.scale_rows(x, w)?;
            std_pool(g, scaled)
        }
        AttentionMode::AttentiveStats => {
            let wr = g.reshape(w, &[1, m])?;
            let mean = g.matmul(wr, x)?;
            let d = g.shape(mean).last();
            let mean = g.reshape(mean, &[d])?;
            let diff = g.sub(x, mean)?;
            let sq = g.mul(diff, diff)?;
            let var = g.matmul(wr, sq)?;
            let var = g.reshape(var, &[d])?;
            let std = g.sqrt_floored(var, SQRT_FLOOR)?;
            g.concat(mean, std)
        }
    }
}

/// Dispatches on the pooling kind; `probe` is required for attention pooling.
pub fn pool<T: Real>(g: &mut Graph<T>, x: Var, kind: PoolingKind, probe: Option<Var>, mode: AttentionMode) -> Result<Var> {
    match kind {
        PoolingKind::Average => average_pool(g, x),
        PoolingKind::Std => std_pool(g, x),
        PoolingKind::Attention => {
            let p = probe.ok_or_else(|| Error::Contract("attention pooling without a probe vector".into()))?;
            attention_pool(g, x, p, mode)
        }
    }
}
