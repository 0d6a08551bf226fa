//! SGD with momentum and weight decay, a warmup + cosine learning-rate
//! schedule, and the clamped update for `epsilon`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_BASE_LR: f64 = 0.05;

/// Linear warmup from 0 followed by a half-cosine decay to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Learning rate used for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_at_time(step as f64)
    }

    /// The schedule as a function of continuous time in steps.
    pub fn lr_at_time(&self, t: f64) -> f64 {
        let warmup = self.warmup_steps() as f64;
        let total = self.total_steps() as f64;
        if t < warmup {
            return self.base_lr * t.max(0.0) / warmup;
        }
        let span = total - warmup;
        if span <= 0.0 {
            return self.base_lr;
        }
        let progress = ((t - warmup) / span).clamp(0.0, 1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Momentum buffers and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<f64>,
    step_count: usize,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn buffers(&self) -> &[f64] {
        &self.buffers
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// `buf ← m·buf + (grad + wd·param)`, then `param ← param − lr·buf`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.buffers.len() || grads.len() != self.buffers.len() {
            return Err(Error::shape(
                format!("{} parameters and gradients", self.buffers.len()),
                format!("{} parameters, {} gradients", params.len(), grads.len()),
            ));
        }
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            *buf = self.momentum * *buf + (g + self.weight_decay * *p);
            *p -= lr * *buf;
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Plain gradient step on `epsilon`, clamped to `[lo, hi]`. No weight decay.
pub fn epsilon_step(epsilon: f64, grad_epsilon: f64, lr: f64, (lo, hi): (f64, f64)) -> f64 {
    (epsilon - lr * grad_epsilon).clamp(lo, hi)
}
