//! SGD with momentum, L2 weight decay folded into the gradient, and a poly
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.poly_power >= 0.0) {
            return Err(Error::invalid("weight decay and poly power must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<f64>,
    pub step: u64,
    pub total_steps: u64,
}

impl Sgd {
    pub fn new(config: SgdConfig, num_params: usize, total_steps: u64) -> Result<Self> {
        config.validate()?;
        if total_steps == 0 {
            return Err(Error::invalid("total steps must be positive"));
        }
        Ok(Self {
            config,
            velocity: vec![0.0; num_params],
            step: 0,
            total_steps,
        })
    }

    /// `lr * (1 - step / total)^power`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.config.lr * (1.0 - frac).powf(self.config.poly_power)
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.velocity.len()],
                actual: vec![params.len(), grads.len()],
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let lr = self.current_lr();
        let SgdConfig { momentum, weight_decay, .. } = self.config;
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
        self.step += 1;
        Ok(())
    }
}
