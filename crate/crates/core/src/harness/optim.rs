//! SGD and Adam over a [`ParamSet`], with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { .. } => OptimizerConfig::Sgd { lr },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {lr} must be positive")));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::contract("Adam needs betas in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = match config {
            OptimizerConfig::Sgd { .. } => Vec::new(),
            OptimizerConfig::Adam { .. } => params.ids().map(|id| vec![0.0; params.get(id).len()]).collect(),
        };
        Ok(Optimizer {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter with a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        self.step += 1;
        for (id, g) in grads.iter() {
            if !params.is_trainable(id) {
                continue;
            }
            let w = params.get_mut(id).data_mut();
            match self.config {
                OptimizerConfig::Sgd { lr } => {
                    for (w, g) in w.iter_mut().zip(g.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let t = self.step as f64;
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
                    for (k, (w, &g)) in w.iter_mut().zip(g.data()).enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
