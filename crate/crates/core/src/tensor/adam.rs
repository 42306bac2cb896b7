//! Bias-corrected Adam.
//!
//! State is keyed by parameter name. Embedding-table entries only receive
//! gradient on the steps where their task is sampled, so each slot keeps its
//! own step counter and is only advanced when a gradient arrives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    slots: BTreeMap<String, Slot>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, slots: BTreeMap::new() }
    }

    /// Applies one update to a parameter from its stored gradient, using
    /// `lr_scale` as a per-group multiplier on the base learning rate.
    pub fn step_param(&mut self, name: &str, param: &mut Tensor, lr_scale: f64) -> Result<()> {
        let Some(grad) = param.grad.take() else { return Ok(()) };
        let n = param.numel();
        if grad.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{name}: gradient {} vs parameter {n}", grad.len()),
            });
        }
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| Slot { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
        if slot.m.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{name}: state {} vs parameter {n}", slot.m.len()),
            });
        }
        slot.t += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(slot.t as i32);
        let bias2 = 1.0 - c.beta2.powi(slot.t as i32);
        let lr = c.lr * lr_scale;
        let values = param.values_mut();
        for i in 0..n {
            slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * grad[i];
            slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let m_hat = slot.m[i] / bias1;
            let v_hat = slot.v[i] / bias2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: "adam_step" });
        }
        Ok(())
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.t)
    }
}
