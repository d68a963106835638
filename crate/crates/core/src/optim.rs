//! First-order parameter updates with linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain fixed-step gradient descent.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient to this global norm when it is exceeded.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 3e-2,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("{section}.optim.lr must be positive")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid(format!("{section}.optim Adam constants out of range")));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::invalid(format!("{section}.optim.max_grad_norm must be positive")));
            }
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Stateful optimiser; the moment buffers are only allocated for Adam.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one descent step; returns the learning rate used.
    pub fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) -> Result<f64> {
        if grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let lr = self.config.lr_at(self.step);
        let mut scale = 1.0;
        if let Some(max) = self.config.max_grad_norm {
            let n = grad.norm();
            if n > max {
                scale = max / n;
            }
        }
        match self.config.kind {
            OptimizerKind::Sgd => params.add_scaled(grad, -lr * scale),
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = vec![0.0; grad.data.len()];
                    self.v = vec![0.0; grad.data.len()];
                }
                let OptimConfig { beta1, beta2, eps, .. } = self.config;
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..grad.data.len() {
                    let g = grad.data[i] * scale;
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params.data[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        self.step += 1;
        if !params.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(lr)
    }
}
