//! AdamW with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-5, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of a single parameter buffer at step `t` (1-based).
pub fn adamw_step<T: Real>(params: &mut [T], grads: &[f64], moments: &mut Moments, t: u64, cfg: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    if t == 0 {
        return Err(Error::Contract("AdamW step count starts at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {} at index {}", grads[i], i)));
    }
    if moments.m.len() != params.len() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i];
        let mut x = p.to_f64();
        x -= cfg.lr * cfg.weight_decay * x;
        let m = &mut moments.m[i];
        let v = &mut moments.v[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        x -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        *p = T::from_f64(x);
    }
    Ok(())
}

/// AdamW over a set of named tensors.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor that has a gradient in `grads`. All gradients are
    /// checked for finiteness before anything is modified.
    pub fn step<T: Real>(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} is {} at index {}", name, g[i], i)));
            }
        }
        self.step += 1;
        for (name, tensor) in params.iter_mut() {
            if let Some(g) = grads.get(name) {
                let moments = self.moments.entry(name.clone()).or_default();
                adamw_step(tensor.data_mut(), g, moments, self.step, &self.config)?;
            }
        }
        Ok(())
    }
}
