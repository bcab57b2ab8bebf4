use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from 0 over `warmup_steps`, then cosine to `min_lr` at
    /// `total_steps`. `warmup_steps = None` means 5% of the total.
    WarmupCosine { total_steps: usize, warmup_steps: Option<usize>, min_lr: f64 },
    /// Multiply by `factor` after `patience` evaluations without improvement.
    ReduceOnPlateau { patience: usize, factor: f64, min_lr: f64 },
}

impl LrSchedule {
    pub fn warmup_cosine(total_steps: usize) -> Self {
        LrSchedule::WarmupCosine { total_steps, warmup_steps: None, min_lr: 1e-6 }
    }

    pub fn plateau() -> Self {
        LrSchedule::ReduceOnPlateau { patience: 10, factor: 0.5, min_lr: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::WarmupCosine { total_steps, warmup_steps, min_lr } => {
                if total_steps == 0 || min_lr <= 0.0 || warmup_steps.is_some_and(|w| w > total_steps) {
                    return Err(Error::Config(format!("invalid warmup-cosine schedule {self:?}")));
                }
                Ok(())
            }
            LrSchedule::ReduceOnPlateau { factor, min_lr, .. } => {
                if !(factor > 0.0 && factor < 1.0) || min_lr <= 0.0 {
                    return Err(Error::Config(format!("invalid plateau schedule {self:?}")));
                }
                Ok(())
            }
        }
    }
}

/// Mutable part of an [`LrScheduler`], for checkpointing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub current: f64,
    pub best: Option<f64>,
    pub bad_evals: usize,
}

/// Stateful evaluation of an [`LrSchedule`] around a base learning rate.
#[derive(Clone, Debug)]
pub struct LrScheduler {
    pub schedule: LrSchedule,
    pub base_lr: f64,
    current: f64,
    best: f64,
    bad_evals: usize,
}

impl LrScheduler {
    pub fn new(schedule: LrSchedule, base_lr: f64) -> Result<Self> {
        schedule.validate()?;
        if base_lr <= 0.0 {
            return Err(Error::Config(format!("base learning rate must be positive, got {base_lr}")));
        }
        Ok(LrScheduler { schedule, base_lr, current: base_lr, best: f64::INFINITY, bad_evals: 0 })
    }

    /// Learning rate for `step`. Plateau schedules treat each call as one
    /// evaluation of `monitored` and require it.
    pub fn lr(&mut self, step: usize, monitored: Option<f64>) -> Result<f64> {
        match self.schedule {
            LrSchedule::Constant => Ok(self.base_lr),
            LrSchedule::WarmupCosine { total_steps, warmup_steps, min_lr } => {
                let warmup = warmup_steps.unwrap_or(total_steps / 20);
                let min_lr = min_lr.min(self.base_lr);
                if step < warmup {
                    // Ramp origin is tiny but strictly positive.
                    return Ok((self.base_lr * step as f64 / warmup as f64).max(min_lr * 1e-3));
                }
                let span = (total_steps.saturating_sub(warmup)).max(1) as f64;
                let t = ((step - warmup) as f64 / span).min(1.0);
                Ok(min_lr + 0.5 * (self.base_lr - min_lr) * (1.0 + (PI * t).cos()))
            }
            LrSchedule::ReduceOnPlateau { patience, factor, min_lr } => {
                let loss = monitored
                    .ok_or_else(|| Error::Config("reduce-on-plateau needs a monitored loss".into()))?;
                if loss < self.best {
                    self.best = loss;
                    self.bad_evals = 0;
                } else {
                    self.bad_evals += 1;
                    if self.bad_evals > patience {
                        self.current = (self.current * factor).max(min_lr);
                        self.bad_evals = 0;
                    }
                }
                Ok(self.current)
            }
        }
    }

    pub fn state(&self) -> SchedulerState {
        SchedulerState { current: self.current, best: self.best.is_finite().then_some(self.best), bad_evals: self.bad_evals }
    }

    pub fn restore(&mut self, s: SchedulerState) {
        self.current = s.current;
        self.best = s.best.unwrap_or(f64::INFINITY);
        self.bad_evals = s.bad_evals;
    }

    /// The most recently produced plateau rate (or the base rate).
    pub fn current(&self) -> f64 {
        self.current
    }
}
