//! Learning-rate and weight-decay schedules: linear LR warmup into a cosine
//! decay, and a cosine weight-decay ramp over the whole horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
}

impl ScheduleConfig {
    /// Paper-scale defaults per objective; desk runs override the horizon.
    pub fn for_objective(name: &str) -> Result<Self> {
        let (base_lr, batch_size) = match name {
            "mae" => (1e-4, 100),
            "dino" => (1e-4, 150),
            "ijepa" | "vjepa" => (6.25e-4, 150),
            other => return Err(Error::Config(format!("unknown objective {other}"))),
        };
        Ok(ScheduleConfig {
            base_lr,
            final_lr: 1e-6,
            warmup_epochs: 30,
            total_epochs: 150,
            wd_start: 0.04,
            wd_end: 0.4,
            batch_size,
            steps_per_epoch: 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::invalid("warmup exceeds total epochs"));
        }
        if self.wd_start > self.wd_end {
            return Err(Error::invalid("wd_start must be <= wd_end"));
        }
        if self.steps_per_epoch == 0 || self.total_epochs == 0 {
            return Err(Error::invalid("schedule horizon must be positive"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }
}

/// Learning rate at a step: linear `0 -> base_lr` over warmup, then cosine
/// `base_lr -> final_lr`; clamps to `final_lr` beyond the horizon.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    let warm = cfg.warmup_steps();
    let total = cfg.total_steps();
    if step >= total {
        return cfg.final_lr;
    }
    if warm > 0 && step < warm {
        return cfg.base_lr * step as f64 / warm as f64;
    }
    let denom = (total - warm).max(1) as f64;
    let prog = (step - warm) as f64 / denom;
    cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * prog).cos())
}

/// Weight decay at a step: cosine `wd_start -> wd_end` over the full
/// horizon; clamps to `wd_end` beyond it.
pub fn wd_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    let total = cfg.total_steps();
    if step >= total {
        return cfg.wd_end;
    }
    let prog = step as f64 / total as f64;
    cfg.wd_end + 0.5 * (cfg.wd_start - cfg.wd_end) * (1.0 + (std::f64::consts::PI * prog).cos())
}
