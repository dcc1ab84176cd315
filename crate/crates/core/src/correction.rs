//! Hard conservation corrections applied to a step operator's raw output.
//!
//! Two channel transforms restore the domain integral of a predicted field
//! to that of the reference (most recent input) frame:
//!
//! * **magnitude**: `out = pred * |ref|_1 / |pred|_1`, for nonnegative
//!   channels such as density. Preserves nonnegativity.
//! * **shift**: `out = pred + (int ref - int pred) / A`, for signed channels
//!   such as momentum components. On a uniform grid the cell measure cancels
//!   and the shift is `(sum ref - sum pred) / (nx * ny)`.
//!
//! All reductions accumulate in `f64` regardless of the working precision.
//! The backward kernels propagate into both the prediction and the reference,
//! so the scale and shift terms stay attached to the training graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{total_quantity, ConservedState, State, Trajectory};
use crate::real::Real;

/// Per-channel correction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    Magnitude,
    Shift,
    None,
}

/// Which frame the correction conserves against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceFrame {
    /// The newest frame of the input window, `u^t`.
    #[default]
    MostRecent,
}

/// Channel routing for the conserved state `(rho, mom_x, mom_y, E)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionSpec {
    pub rho: CorrectionMode,
    pub mom_x: CorrectionMode,
    pub mom_y: CorrectionMode,
    pub energy: CorrectionMode,
    pub denominator_epsilon: f64,
    pub reference_frame: ReferenceFrame,
    /// Apply the correction inside the training rollout (gradients flow
    /// through it). When false the correction is used at inference only.
    pub in_training_graph: bool,
}

impl Default for CorrectionSpec {
    /// Mass by magnitude, momentum by shift, energy untouched.
    fn default() -> Self {
        CorrectionSpec {
            rho: CorrectionMode::Magnitude,
            mom_x: CorrectionMode::Shift,
            mom_y: CorrectionMode::Shift,
            energy: CorrectionMode::None,
            denominator_epsilon: 1e-12,
            reference_frame: ReferenceFrame::MostRecent,
            in_training_graph: true,
        }
    }
}

impl CorrectionSpec {
    /// Every channel passes through unchanged.
    pub fn disabled() -> Self {
        CorrectionSpec {
            rho: CorrectionMode::None,
            mom_x: CorrectionMode::None,
            mom_y: CorrectionMode::None,
            energy: CorrectionMode::None,
            ..Self::default()
        }
    }

    /// Mass only, the earlier density-rescaling variant.
    pub fn mass_only() -> Self {
        CorrectionSpec {
            mom_x: CorrectionMode::None,
            mom_y: CorrectionMode::None,
            ..Self::default()
        }
    }

    pub fn modes(&self) -> [CorrectionMode; 4] {
        [self.rho, self.mom_x, self.mom_y, self.energy]
    }

    pub fn is_enabled(&self) -> bool {
        self.modes().iter().any(|m| *m != CorrectionMode::None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.denominator_epsilon.is_finite() && self.denominator_epsilon > 0.0) {
            return Err(Error::config(
                "correction.denominator_epsilon",
                "must be a positive finite number",
            ));
        }
        for (name, mode) in [("mom_x", self.mom_x), ("mom_y", self.mom_y)] {
            if mode == CorrectionMode::Magnitude {
                return Err(Error::config(
                    format!("correction.{name}"),
                    "signed momentum cannot use magnitude correction",
                ));
            }
        }
        Ok(())
    }
}

/// A correction that had to fall back instead of applying its formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegenerateEvent {
    pub channel: usize,
    /// `|pred|_1` that fell under the denominator epsilon.
    pub predicted_l1: f64,
}

fn sum_f64<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy()).sum()
}

fn l1_f64<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64_lossy().abs()).sum()
}

/// Cached reductions from a magnitude correction's forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnitudeState {
    pub pred_l1: f64,
    pub ref_l1: f64,
    pub fallback: bool,
}

/// Rescales `pred` so its l1 norm equals that of `reference`.
///
/// When `|pred|_1 < eps` the reference total is spread uniformly instead.
pub fn magnitude_correct<T: Real>(pred: &[T], reference: &[T], eps: f64) -> (Vec<T>, MagnitudeState) {
    assert_eq!(pred.len(), reference.len());
    let pred_l1 = l1_f64(pred);
    let ref_l1 = l1_f64(reference);
    if pred_l1 < eps {
        let fill = T::from_f64_lossy(ref_l1 / pred.len() as f64);
        let state = MagnitudeState {
            pred_l1,
            ref_l1,
            fallback: true,
        };
        return (vec![fill; pred.len()], state);
    }
    let scale = ref_l1 / pred_l1;
    let out = pred
        .iter()
        .map(|&p| T::from_f64_lossy(p.to_f64_lossy() * scale))
        .collect();
    let state = MagnitudeState {
        pred_l1,
        ref_l1,
        fallback: false,
    };
    (out, state)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Vector-Jacobian product of [`magnitude_correct`]: returns
/// `(d pred, d reference)` for upstream gradient `grad`.
pub fn magnitude_correct_backward<T: Real>(
    pred: &[T],
    reference: &[T],
    state: &MagnitudeState,
    grad: &[T],
) -> (Vec<T>, Vec<T>) {
    let n = pred.len() as f64;
    if state.fallback {
        let gsum = sum_f64(grad);
        let g_ref = reference
            .iter()
            .map(|r| T::from_f64_lossy(sign(r.to_f64_lossy()) * gsum / n))
            .collect();
        return (vec![T::zero(); pred.len()], g_ref);
    }
    let scale = state.ref_l1 / state.pred_l1;
    let g_dot_p: f64 = grad
        .iter()
        .zip(pred)
        .map(|(g, p)| g.to_f64_lossy() * p.to_f64_lossy())
        .sum();
    let coupling = g_dot_p * state.ref_l1 / (state.pred_l1 * state.pred_l1);
    let g_pred = grad
        .iter()
        .zip(pred)
        .map(|(g, p)| T::from_f64_lossy(g.to_f64_lossy() * scale - sign(p.to_f64_lossy()) * coupling))
        .collect();
    let g_ref = reference
        .iter()
        .map(|r| T::from_f64_lossy(sign(r.to_f64_lossy()) * g_dot_p / state.pred_l1))
        .collect();
    (g_pred, g_ref)
}

/// Adds the uniform offset that makes `sum(out) == sum(reference)`.
///
/// Equivalent to `pred + (int ref - int pred) / A` on a uniform grid.
pub fn shift_correct<T: Real>(pred: &[T], reference: &[T]) -> Vec<T> {
    assert_eq!(pred.len(), reference.len());
    let shift = (sum_f64(reference) - sum_f64(pred)) / pred.len() as f64;
    pred.iter()
        .map(|&p| T::from_f64_lossy(p.to_f64_lossy() + shift))
        .collect()
}

/// Vector-Jacobian product of [`shift_correct`].
pub fn shift_correct_backward<T: Real>(grad: &[T]) -> (Vec<T>, Vec<T>) {
    let mean = sum_f64(grad) / grad.len() as f64;
    let g_pred = grad
        .iter()
        .map(|g| T::from_f64_lossy(g.to_f64_lossy() - mean))
        .collect();
    let g_ref = vec![T::from_f64_lossy(mean); grad.len()];
    (g_pred, g_ref)
}

/// Applies `spec` channel by channel to a predicted conserved state.
pub fn apply_correction(
    pred: &ConservedState,
    reference: &ConservedState,
    spec: &CorrectionSpec,
) -> Result<(ConservedState, Vec<DegenerateEvent>)> {
    if pred.grid != reference.grid {
        return Err(Error::Shape("prediction and reference grids differ".into()));
    }
    let mut events = Vec::new();
    let mut channels = Vec::with_capacity(4);
    for (c, mode) in spec.modes().into_iter().enumerate() {
        let (p, r) = (pred.channel(c), reference.channel(c));
        let out = match mode {
            CorrectionMode::Magnitude => {
                let (out, state) = magnitude_correct(p, r, spec.denominator_epsilon);
                if state.fallback {
                    events.push(DegenerateEvent {
                        channel: c,
                        predicted_l1: state.pred_l1,
                    });
                }
                out
            }
            CorrectionMode::Shift => shift_correct(p, r),
            CorrectionMode::None => p.to_vec(),
        };
        channels.push(out);
    }
    Ok((ConservedState::from_channels(pred.grid, channels)?, events))
}

/// Relative change of a channel total from frame 0 at one time index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub t: usize,
    pub channel: String,
    pub drift: f64,
}

/// Per-channel conservation drift `|Q_t - Q_0| / max(|Q_0|, eps)`; when
/// `|Q_0| < eps` the absolute drift is reported.
pub fn conservation_drift(traj: &Trajectory<ConservedState>, eps: f64) -> Result<Vec<DriftPoint>> {
    if traj.len() < 2 {
        return Err(Error::Empty("drift needs at least two frames".into()));
    }
    let mut out = Vec::with_capacity(traj.len() * 4);
    let initial = traj.states[0].totals();
    for (t, s) in traj.states.iter().enumerate() {
        let totals = s.totals();
        for c in 0..4 {
            let q0 = initial[c];
            let diff = (totals[c] - q0).abs();
            let drift = if q0.abs() < eps { diff } else { diff / q0.abs() };
            out.push(DriftPoint {
                t,
                channel: ConservedState::CHANNELS[c].to_string(),
                drift,
            });
        }
    }
    Ok(out)
}

/// Largest drift of `channel` over the whole series.
pub fn max_drift(points: &[DriftPoint], channel: &str) -> f64 {
    points
        .iter()
        .filter(|p| p.channel == channel)
        .map(|p| p.drift)
        .fold(0.0, f64::max)
}

/// Totals restored by correction, kept in one place so tests and the rollout
/// agree on what "conserved" means.
pub fn corrected_channels(spec: &CorrectionSpec) -> Vec<usize> {
    spec.modes()
        .iter()
        .enumerate()
        .filter(|(_, m)| **m != CorrectionMode::None)
        .map(|(c, _)| c)
        .collect()
}

/// Sum of a channel scaled by the cell measure; re-exported for drift checks.
pub fn channel_total(state: &ConservedState, channel: usize) -> f64 {
    total_quantity(state.channel(channel), &state.grid)
}
