use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant stage learning rates multiplied by a per-epoch
/// exponential decay: `lr(e) = stage_lr(e) · γ^e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub stage_lrs: Vec<f64>,
    pub stage_boundaries: Vec<usize>,
    pub decay_gamma: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            stage_lrs: vec![0.1, 0.01, 0.001],
            stage_boundaries: vec![20, 50],
            decay_gamma: 0.998,
            total_epochs: 100,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stage_lrs.len() != self.stage_boundaries.len() + 1 {
            return bad(format!(
                "{} stage learning rates need {} boundaries",
                self.stage_lrs.len(),
                self.stage_lrs.len().saturating_sub(1)
            ));
        }
        if self
            .stage_lrs
            .iter()
            .any(|&lr| !(lr > 0.0 && lr.is_finite()))
        {
            return bad("stage learning rates must be positive".into());
        }
        if self.stage_lrs.windows(2).any(|w| w[1] >= w[0]) {
            return bad("stage learning rates must strictly decrease".into());
        }
        if self.stage_boundaries.windows(2).any(|w| w[1] <= w[0])
            || self.stage_boundaries.first() == Some(&0)
            || self
                .stage_boundaries
                .iter()
                .any(|&b| b >= self.total_epochs)
        {
            return bad("stage boundaries must strictly increase within (0, total_epochs)".into());
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return bad(format!(
                "schedule.gamma must lie in (0, 1], got {}",
                self.decay_gamma
            ));
        }
        Ok(())
    }

    pub fn stage_of(&self, epoch: usize) -> usize {
        self.stage_boundaries
            .iter()
            .take_while(|&&b| epoch >= b)
            .count()
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: schedule.total_epochs,
        });
    }
    let stage = schedule.stage_lrs[schedule.stage_of(epoch)];
    Ok(stage * schedule.decay_gamma.powi(epoch as i32))
}
