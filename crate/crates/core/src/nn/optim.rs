//! Adam and reduce-on-plateau learning-rate scheduling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Bias-corrected Adam with first and second moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam { config, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    /// One update of `params` in place with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for i in 0..params.len() {
            let mut g = grads[i];
            if weight_decay != 0.0 {
                g += weight_decay * params[i];
            }
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let denom = self.v[i].sqrt() / bc2_sqrt + eps;
            params[i] -= step_size * self.m[i] / denom;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Monitored steps without improvement tolerated before a reduction.
    pub patience: u64,
    pub cooldown: u64,
    /// Relative improvement needed to count as better.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 1000, cooldown: 200, threshold: 1e-6, min_lr: 0.0 }
    }
}

/// Reduce-on-plateau for a metric being minimized, relative threshold mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: f64,
    pub num_bad: u64,
    pub cooldown_counter: u64,
    pub reductions: u64,
}

/// Reductions smaller than this are skipped.
const MIN_LR_CHANGE: f64 = 1e-8;

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            num_bad: 0,
            cooldown_counter: 0,
            reductions: 0,
        }
    }

    /// Feeds one monitored value; returns true when the LR was reduced.
    pub fn step(&mut self, metric: f64) -> bool {
        if metric < self.best * (1.0 - self.config.threshold) {
            self.best = metric;
            self.num_bad = 0;
        } else {
            self.num_bad += 1;
        }
        if self.cooldown_counter > 0 {
            self.cooldown_counter -= 1;
            self.num_bad = 0;
        }
        if self.num_bad > self.config.patience {
            self.num_bad = 0;
            self.cooldown_counter = self.config.cooldown;
            let new_lr = (self.lr * self.config.factor).max(self.config.min_lr);
            if self.lr - new_lr > MIN_LR_CHANGE {
                self.lr = new_lr;
                self.reductions += 1;
                return true;
            }
        }
        false
    }
}
