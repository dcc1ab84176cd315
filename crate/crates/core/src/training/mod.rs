//! Autoregressive training and inference.

mod adam;
mod evaluate;
mod loss;
mod rollout;
mod schedule;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Precision;

pub use adam::Adam;
pub use evaluate::{evaluate, EvalConfig, Evaluation};
pub use loss::{rollout_loss, rollout_loss_graph, GraphLoss, LossValue, LOSS_EPSILON};
pub use rollout::{rollout, RolloutOutput};
pub use schedule::OneCycle;
pub use train::{train, EpochRecord, NanDiagnostic, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Autoregressive steps `tau` per training window.
    pub rollout_steps: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Starting learning rate is `peak_lr / initial_lr_divisor`.
    pub initial_lr_divisor: f64,
    /// Final learning rate is `final_lr_fraction * peak_lr`.
    pub final_lr_fraction: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rollout_steps: 5,
            epochs: 100,
            warmup_epochs: 20,
            peak_lr: 1e-3,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch_size: 16,
            seed: 0,
            precision: Precision::Single,
            initial_lr_divisor: 25.0,
            final_lr_fraction: 1e-2,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollout_steps == 0 {
            return Err(Error::config("training.rollout_steps", "must be at least 1"));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::config("training.warmup_epochs", "must be smaller than epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config("training.peak_lr", "must be positive"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("training.betas", "must lie in [0, 1)"));
        }
        if self.initial_lr_divisor < 1.0 || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config(
                "training.initial_lr_divisor",
                "divisor must be >= 1 and final fraction in [0, 1]",
            ));
        }
        Ok(())
    }
}
