//! AdamW with decoupled weight decay, restricted to one parameter group.

use super::param::{Group, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for the trainable parameters of one [`Group`].
#[derive(Debug, Clone)]
pub struct AdamW {
    group: Group,
    config: AdamWConfig,
    step: u64,
    state: Vec<(ParamId, Moments)>,
}

impl AdamW {
    pub fn new(group: Group, config: AdamWConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {}", config.lr)));
        }
        if config.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        Ok(AdamW {
            group,
            config,
            step: 0,
            state: Vec::new(),
        })
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at `lr` (which overrides the configured rate, for
    /// schedules). Only trainable parameters of this optimizer's group move;
    /// gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if self.state.is_empty() {
            self.state = store
                .iter()
                .filter(|(_, p)| p.group() == self.group && p.trainable)
                .map(|(id, p)| {
                    let n = p.value.numel();
                    (id, Moments { m: vec![0.0; n], v: vec![0.0; n] })
                })
                .collect();
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, mom) in &mut self.state {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad().data().to_vec();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                value[i] *= 1.0 - lr * weight_decay;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
