//! AdamW with decoupled weight decay and a per-epoch exponential schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter in `params`, then clear the grads.
    ///
    /// ```text
    /// θ ← θ − lr·λ·θ
    /// m ← β1·m + (1−β1)·g,   v ← β2·v + (1−β2)·g²
    /// θ ← θ − lr · m̂ / (√v̂ + ε)
    /// ```
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        // Collect first so a missing grad leaves everything untouched.
        let mut grads = Vec::with_capacity(params.len());
        for (path, t) in params.iter() {
            let g = t.grad().ok_or_else(|| Error::MissingGrad(path.clone()))?;
            grads.push((path.clone(), t.to_vec(), g));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (path, mut theta, g) in grads {
            let mom = self.moments.entry(path.clone()).or_insert_with(|| Moments {
                m: vec![0.0; theta.len()],
                v: vec![0.0; theta.len()],
            });
            for i in 0..theta.len() {
                theta[i] -= c.lr * c.weight_decay * theta[i];
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g[i];
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                theta[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            // Fresh leaf: grads start empty.
            params.set(&path, theta)?;
        }
        Ok(())
    }
}

/// `lr(epoch) = initial · decay^epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi(epoch as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 0.01, decay: 0.985 }
    }
}
