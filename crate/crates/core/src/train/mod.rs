//! Optimizer, learning-rate schedules, the training loop and checkpoints.

mod checkpoint;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, CKPT_MAGIC, CKPT_VERSION,
};
pub use optim::{adamw_step, clip_global_norm, global_norm, AdamW, OptimizerState};
pub use schedule::{
    cosine_lr, onecycle_lr, onecycle_peak, SchedulerKind, ONECYCLE_DIV, ONECYCLE_FINAL_DIV,
    ONECYCLE_PCT_START,
};
pub use trainer::{l2_loss, EpochStats, StepStats, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scheduler: SchedulerKind,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-2,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 1,
            batch_size: 16,
            scheduler: SchedulerKind::OneCycle,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        if !(0.0..self.lr_max).contains(&self.lr_min) {
            return Err(Error::Config(format!(
                "lr_min must be in [0, lr_max), got {}",
                self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(Error::Config(format!(
                "weight_decay must be in [0, 1), got {}",
                self.weight_decay
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "betas must be in [0, 1), got ({b1}, {b2})"
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate at optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        match self.scheduler {
            SchedulerKind::OneCycle => onecycle_lr(step, total, self.lr_max),
            SchedulerKind::Cosine => {
                if step >= total {
                    return Err(Error::StepOutOfRange { step, total });
                }
                cosine_lr(step, total, self.lr_max, self.lr_min)
            }
        }
    }
}
