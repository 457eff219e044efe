use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warm-up to `max_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn new(max_lr: f64, warmup_steps: u64, total_steps: u64, min_lr: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(Error::param(format!(
                "warm-up ({warmup_steps}) longer than schedule ({total_steps})"
            )));
        }
        if !(0.0..=max_lr).contains(&min_lr) {
            return Err(Error::param(format!(
                "need 0 <= min_lr ({min_lr}) <= max_lr ({max_lr})"
            )));
        }
        Ok(Self {
            max_lr,
            warmup_steps,
            total_steps,
            min_lr,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::param(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.max_lr * step as f64 / self.warmup_steps as f64);
        }
        let decay_steps = self.total_steps - self.warmup_steps;
        if decay_steps == 0 {
            return Ok(self.max_lr);
        }
        let progress = (step - self.warmup_steps) as f64 / decay_steps as f64;
        Ok(self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (PI * progress).cos()))
    }
}
