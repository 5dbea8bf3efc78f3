use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Linear warmup followed by inverse-square-root decay of the update
/// number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_init: f64,
    pub peak: f64,
    pub warmup_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_init: 1e-7,
            peak: 1e-4,
            warmup_steps: 2000,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_init >= self.peak {
            return Err(Error::config(format!(
                "schedule: warmup_init {} must be below peak {}",
                self.warmup_init, self.peak
            )));
        }
        if self.warmup_steps < 1 {
            return Err(Error::config("schedule: warmup_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Learning rate at an update number. Steps counted as optimizer updates.
pub fn lr_at(step: u64, sched: &ScheduleConfig) -> f64 {
    if step < sched.warmup_steps {
        let frac = step as f64 / sched.warmup_steps as f64;
        sched.warmup_init + (sched.peak - sched.warmup_init) * frac
    } else {
        sched.peak * (sched.warmup_steps as f64 / step as f64).sqrt()
    }
}
