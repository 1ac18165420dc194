use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::numeric::{Matrix, ParamStore};

/// AdamW hyperparameters and cosine schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate reached at the end of the schedule.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_floor: 2e-6,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) || !(self.lr_floor >= 0.0) || self.lr_floor > self.lr {
            return Err("optim: need 0 <= lr_floor <= lr and lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("optim: betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err("optim: eps must be positive and weight_decay nonnegative".into());
        }
        Ok(())
    }
}

/// Cosine annealing from `lr` at step 0 to `lr_floor` at `total` steps.
pub fn cosine_lr(cfg: &OptimConfig, step: u64, total: u64) -> f64 {
    if total == 0 {
        return cfg.lr_floor;
    }
    let t = (step.min(total) as f64) / total as f64;
    cfg.lr_floor + 0.5 * (cfg.lr - cfg.lr_floor) * (1.0 + (PI * t).cos())
}

/// Moment estimates per parameter plus the update counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    /// Length of the cosine schedule in steps.
    pub total_steps: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimState {
    pub fn new(config: OptimConfig, store: &ParamStore, total_steps: u64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            step: 0,
            total_steps,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(&self.config, self.step, self.total_steps)
    }

    /// One AdamW update with decoupled weight decay, using the learning rate
    /// scheduled for the current step; then zeroes the gradients and advances
    /// the counter. Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let c = self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
            p.zero_grad();
        }
        self.step += 1;
        lr
    }
}
