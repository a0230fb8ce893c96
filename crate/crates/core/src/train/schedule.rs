//! Learning-rate program and loss-region switching.
//!
//! Updates are numbered `1..=total_steps`; the rate of update `s` is
//! `lr_at_step(s)`, so the last pre-training update runs at the floor and the
//! last annealing update at zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::LossRegion;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Anneal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSpec {
    pub start_lr: f64,
    pub anneal_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub total_steps: u64,
    pub loss_region_switch_step: u64,
    pub anneal: Option<AnnealSpec>,
    /// Delayed frames per update.
    pub batch_frames: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            warmup_steps: 25_000,
            peak_lr: 2e-4,
            floor_lr: 2e-5,
            total_steps: 500_000,
            loss_region_switch_step: 250_000,
            anneal: Some(AnnealSpec {
                start_lr: 5e-5,
                anneal_steps: 50_000,
            }),
            batch_frames: 16_384,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.warmup_steps > self.total_steps {
            return fail("warmup_steps exceeds total_steps");
        }
        if !(self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return fail("learning rates must satisfy 0 <= floor_lr <= peak_lr");
        }
        if self.loss_region_switch_step > self.total_steps {
            return fail("loss_region_switch_step exceeds total_steps");
        }
        if self.batch_frames == 0 {
            return fail("batch_frames must be >= 1");
        }
        if let Some(a) = &self.anneal {
            if !(a.start_lr > 0.0 && a.start_lr.is_finite()) {
                return fail("anneal start_lr must be > 0");
            }
            if a.anneal_steps == 0 {
                return fail("anneal_steps must be >= 1");
            }
        }
        Ok(())
    }

    /// Number of updates in a phase.
    pub fn phase_steps(&self, phase: Phase) -> Result<u64> {
        match phase {
            Phase::Pretrain => Ok(self.total_steps),
            Phase::Anneal => self
                .anneal
                .as_ref()
                .map(|a| a.anneal_steps)
                .ok_or_else(|| Error::Config("schedule has no anneal section".into())),
        }
    }

    /// Loss region of pre-training update `step`.
    pub fn region_at_step(&self, step: u64) -> LossRegion {
        if step < self.loss_region_switch_step {
            LossRegion::Whole
        } else {
            LossRegion::Target
        }
    }
}

pub fn lr_at_step(schedule: &TrainSchedule, step: u64, phase: Phase) -> Result<f64> {
    let max = schedule.phase_steps(phase)?;
    if step > max {
        return Err(Error::StepOutOfRange { step, max });
    }
    Ok(match phase {
        Phase::Pretrain => {
            let (w, total) = (schedule.warmup_steps, schedule.total_steps);
            if step < w {
                schedule.peak_lr * (step as f64 / w as f64)
            } else if step == w {
                schedule.peak_lr
            } else {
                let frac = (total - step) as f64 / (total - w) as f64;
                schedule.floor_lr + (schedule.peak_lr - schedule.floor_lr) * frac
            }
        }
        Phase::Anneal => {
            let a = schedule.anneal.as_ref().expect("checked by phase_steps");
            a.start_lr * ((a.anneal_steps - step) as f64 / a.anneal_steps as f64)
        }
    })
}
