use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Constant,
}

/// Learning-rate schedule. Defaults: 5e-5 annealed to 1e-6.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
    pub kind: ScheduleKind,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 5e-5,
            min_lr: 1e-6,
            total_steps: 1000,
            kind: ScheduleKind::Cosine,
        }
    }
}

impl LrSchedule {
    pub fn cosine(initial_lr: f64, min_lr: f64, total_steps: u64) -> Self {
        Self {
            initial_lr,
            min_lr,
            total_steps,
            kind: ScheduleKind::Cosine,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            initial_lr: lr,
            min_lr: lr,
            total_steps: 0,
            kind: ScheduleKind::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr >= 0.0 && self.min_lr <= self.initial_lr && self.initial_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 <= min_lr <= initial_lr, got {} and {}",
                self.min_lr, self.initial_lr
            )));
        }
        Ok(())
    }

    /// Learning rate at `step`; steps past the end clamp to `min_lr`.
    pub fn lr(&self, step: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.initial_lr,
            ScheduleKind::Cosine => {
                if self.total_steps == 0 || step >= self.total_steps {
                    return self.min_lr;
                }
                let progress = step as f64 / self.total_steps as f64;
                let lr = self.min_lr
                    + 0.5 * (self.initial_lr - self.min_lr) * (1.0 + (PI * progress).cos());
                lr.clamp(self.min_lr, self.initial_lr)
            }
        }
    }
}

/// Free-function form of [`LrSchedule::lr`].
pub fn schedule_lr(sched: &LrSchedule, step: u64) -> f64 {
    sched.lr(step)
}
