use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Hyperparameters for the decoupled-weight-decay Adam update with a step
/// learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate every `scheduler_interval` steps.
    pub decay_factor: f64,
    /// Zero disables the schedule.
    pub scheduler_interval: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decay_factor: 0.5,
            scheduler_interval: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: config.lr,
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the stored gradients, then advances the schedule.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        let c = &self.config;
        self.step += 1;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = self.lr;
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let grad = t.grad.take().expect("checked above");
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= lr * c.weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            t.grad = Some(grad);
        }
        if c.scheduler_interval > 0 && self.step.is_multiple_of(c.scheduler_interval) {
            self.lr *= c.decay_factor;
        }
        Ok(())
    }
}
