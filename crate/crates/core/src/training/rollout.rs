use crate::correction::CorrectionSpec;
use crate::error::{Error, Result};
use crate::field::{ConservedState, Trajectory};
use crate::metrics::StepEvent;
use crate::models::{predict, StepOperator};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    /// Newest seed frame followed by the predictions.
    pub trajectory: Trajectory<ConservedState>,
    pub events: Vec<StepEvent>,
    /// First step (1-based) whose prediction was not finite.
    pub diverged_at: Option<usize>,
}

impl RolloutOutput {
    pub fn steps(&self) -> usize {
        self.trajectory.len() - 1
    }
}

/// Autoregressive inference: predict, clip, correct against the newest
/// window frame, slide the window. Stops early at the first non-finite
/// prediction instead of failing.
pub fn rollout<T: Real>(
    op: &dyn StepOperator<T>,
    spec: Option<&CorrectionSpec>,
    seeds: &[ConservedState],
    n: usize,
    dt: f64,
) -> Result<RolloutOutput> {
    let cfg = op.config();
    if seeds.len() != cfg.history {
        return Err(Error::Shape(format!(
            "operator needs {} seed frames, got {}",
            cfg.history,
            seeds.len()
        )));
    }
    if n == 0 {
        return Err(Error::config("horizon", "rollout needs at least one step"));
    }
    let grid = seeds[0].grid;
    if grid.nx != cfg.nx || grid.ny != cfg.ny {
        return Err(Error::Shape(format!(
            "seed grid {}x{} does not match the operator grid {}x{}",
            grid.nx, grid.ny, cfg.nx, cfg.ny
        )));
    }
    let mut window: Vec<Tensor<T>> = seeds.iter().map(Tensor::from_state).collect();
    let mut states = vec![seeds[seeds.len() - 1].clone()];
    let mut events = Vec::new();
    let mut diverged_at = None;
    for step in 1..=n {
        let (pred, ev) = predict(op, &window, spec)?;
        if !pred.is_finite() {
            log::warn!("rollout diverged at step {step}");
            diverged_at = Some(step);
            break;
        }
        let state = match pred.to_conserved(grid) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("rollout produced an invalid state at step {step}: {e}");
                diverged_at = Some(step);
                break;
            }
        };
        events.extend(ev.into_iter().map(|event| StepEvent { step, event }));
        states.push(state);
        window.remove(0);
        window.push(pred);
    }
    Ok(RolloutOutput {
        trajectory: Trajectory::new(dt, states)?,
        events,
        diverged_at,
    })
}
