//! Learning-rate schedule and stochastic-depth rates.

use std::f64::consts::PI;

use crate::network::linspace;

/// Linear warmup to `peak` followed by half-cosine annealing to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn from_epochs(peak: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Self {
        let spe = steps_per_epoch as u64;
        Self::new(peak, warmup_epochs as u64 * spe, epochs as u64 * spe)
    }
}

/// `peak·step/warmup` during warmup, then `½·peak·(1 + cos(π·progress))`
/// with `progress` running from 0 at the end of warmup to 1 at the last
/// step; zero from the last step on.
pub fn lr_at(step: u64, schedule: &LrSchedule) -> f64 {
    let LrSchedule {
        peak,
        warmup_steps,
        total_steps,
    } = *schedule;
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    0.5 * peak * (1.0 + (PI * progress).cos())
}

/// Per-block stochastic-depth rates, linear from 0 to `max` over depth.
pub fn drop_path_rates(blocks: usize, max: f64) -> Vec<f64> {
    linspace(0.0, max, blocks)
}
