//! Linear warmup followed by cosine annealing.

use std::f64::consts::PI;

use crate::error::{Result, TrainError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl ScheduleConfig {
    pub fn new(warmup_steps: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<Self> {
        if !(0 < warmup_steps && warmup_steps < total_steps) {
            return Err(TrainError::Schedule(format!(
                "need 0 < warmup ({warmup_steps}) < total steps ({total_steps})"
            )));
        }
        if !(0.0 <= lr_min && lr_min <= lr_max && lr_max.is_finite()) {
            return Err(TrainError::Schedule(format!("need 0 <= lr_min ({lr_min}) <= lr_max ({lr_max})")));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            lr_max,
            lr_min,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(TrainError::Schedule(format!(
                "step {step} beyond total {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.lr_max * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let lr = self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * progress).cos());
        // cos(pi) is not exactly -1 in floating point
        Ok(if step == self.total_steps { self.lr_min } else { lr.max(self.lr_min) })
    }
}
