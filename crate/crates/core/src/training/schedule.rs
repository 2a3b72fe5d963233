use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constant rate, then a linear ramp to zero at `total_epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearDecaySchedule {
    pub base_lr: f64,
    pub decay_start_epoch: u64,
    pub total_epochs: u64,
}

impl Default for LinearDecaySchedule {
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            decay_start_epoch: 150,
            total_epochs: 300,
        }
    }
}

impl LinearDecaySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 || self.decay_start_epoch > self.total_epochs {
            return Err(Error::Config(format!(
                "need 0 < total_epochs and decay_start_epoch <= total_epochs, got {} and {}",
                self.total_epochs, self.decay_start_epoch
            )));
        }
        Ok(())
    }

    pub fn at(&self, epoch: u64) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::invalid(format!("epoch {epoch} outside [0, {}]", self.total_epochs)));
        }
        if epoch < self.decay_start_epoch {
            return Ok(self.base_lr);
        }
        let span = (self.total_epochs - self.decay_start_epoch) as f64;
        if span == 0.0 {
            return Ok(0.0);
        }
        Ok(self.base_lr * (self.total_epochs - epoch) as f64 / span)
    }
}

/// Step decay: `base_lr * gamma^k` after `k` milestones have been reached.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiStepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<u64>,
    pub gamma: f64,
    pub total_iterations: u64,
}

impl Default for MultiStepSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            milestones: vec![5_000, 10_000, 20_000, 30_000],
            gamma: 0.5,
            total_iterations: 51_000,
        }
    }
}

impl MultiStepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn at(&self, iteration: u64) -> Result<f64> {
        if iteration > self.total_iterations {
            return Err(Error::invalid(format!(
                "iteration {iteration} outside [0, {}]",
                self.total_iterations
            )));
        }
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        Ok(self.base_lr * self.gamma.powi(passed as i32))
    }
}

/// Degradation-stage learning rate with the default recipe.
pub fn lr_stage_schedule(epoch: u64) -> Result<f64> {
    LinearDecaySchedule::default().at(epoch)
}

/// Super-resolution-stage learning rate with the default recipe.
pub fn sr_stage_schedule(iteration: u64) -> Result<f64> {
    MultiStepSchedule::default().at(iteration)
}
