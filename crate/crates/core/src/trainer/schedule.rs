use std::f64::consts::PI;

use crate::error::{Result, VitpError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    /// Linear warmup to `base_lr`, then half-cosine decay reaching 0 at `total_steps`.
    pub fn lr(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(VitpError::Config(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        let w = self.warmup_steps().min(self.total_steps);
        if step < w {
            return Ok(self.base_lr * step as f64 / w as f64);
        }
        if self.total_steps == w {
            return Ok(self.base_lr);
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

pub fn cosine_lr(step: u64, s: &Schedule) -> Result<f64> {
    s.lr(step)
}
