use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rollout::rollout;
use crate::correction::CorrectionSpec;
use crate::error::{Error, Result};
use crate::field::{ConservedState, Trajectory};
use crate::metrics::{relative_error_channels, RolloutResult};
use crate::models::StepOperator;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Frame index of the newest seed frame.
    pub seed_time: usize,
    pub horizon: usize,
    /// Steps reported individually in the summary.
    pub report_steps: Vec<usize>,
    pub correlation_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed_time: 10,
            horizon: 10,
            report_steps: vec![1, 5, 10],
            correlation_threshold: 0.9,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("eval.horizon", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.correlation_threshold) {
            return Err(Error::config("eval.correlation_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Primitive-space scores plus the conserved-space error series.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub result: RolloutResult,
    pub conserved: Trajectory<ConservedState>,
    /// Relative error over `(rho, mom_x, mom_y, E)` at steps `1..`.
    pub conserved_error: Vec<f64>,
}

/// Rolls every trajectory out from `seed_time` for `horizon` steps and
/// scores the predictions against the reference frames.
pub fn evaluate<T: Real>(
    op: &dyn StepOperator<T>,
    spec: Option<&CorrectionSpec>,
    dataset: &[Trajectory<ConservedState>],
    seed_time: usize,
    horizon: usize,
) -> Result<Vec<Evaluation>> {
    let h = op.config().history;
    if seed_time + 1 < h {
        return Err(Error::config("eval.seed_time", format!("needs {h} frames of history")));
    }
    if let Some(i) = dataset.iter().position(|t| t.len() <= seed_time + horizon) {
        return Err(Error::format(
            format!("trajectory {i}"),
            format!(
                "has {} frames, seed time {seed_time} plus horizon {horizon} needs {}",
                dataset[i].len(),
                seed_time + horizon + 1
            ),
        ));
    }
    dataset
        .par_iter()
        .enumerate()
        .map(|(sample, traj)| {
            let seeds = &traj.states[seed_time + 1 - h..=seed_time];
            let out = rollout(op, spec, seeds, horizon, traj.dt)?;
            let truth = traj.slice(seed_time..seed_time + horizon + 1)?;
            let conserved_error = (1..out.trajectory.len())
                .map(|t| {
                    relative_error_channels(&out.trajectory.states[t], &truth.states[t], &[0, 1, 2, 3])
                        .map(|e| e.value)
                })
                .collect::<Result<Vec<_>>>()?;
            let (pred_p, report) = out.trajectory.to_primitive()?;
            let (truth_p, _) = truth.to_primitive()?;
            let result = RolloutResult::score(
                sample,
                pred_p,
                truth_p,
                out.events,
                out.diverged_at,
                report.clamped_density + report.clamped_pressure,
            )?;
            Ok(Evaluation {
                result,
                conserved: out.trajectory,
                conserved_error,
            })
        })
        .collect()
}
