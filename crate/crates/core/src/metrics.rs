//! Rollout diagnostics: relative L2 error, Pearson correlation, the
//! high-correlation duration and the cross-sample summary table.
//!
//! Errors are computed on primitive variables `(rho, p, u)`, velocity counted
//! as one two-component channel.

use serde::{Deserialize, Serialize};

use crate::correction::DegenerateEvent;
use crate::error::{Error, Result};
use crate::field::{PrimitiveState, State, Trajectory};

/// Guard for zero-norm truth fields.
pub const ERROR_EPSILON: f64 = 1e-12;

/// Default correlation threshold of the duration metric.
pub const CORRELATION_THRESHOLD: f64 = 0.9;

/// Channel groups reported per step: density, pressure, velocity.
pub const ERROR_CHANNELS: [&str; 3] = ["rho", "p", "u"];

/// Channels with their own correlation series.
pub const CORRELATION_CHANNELS: [&str; 4] = ["rho", "p", "u_x", "u_y"];

/// Which primitive channels an error covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSet {
    All,
    Rho,
    P,
    U,
}

impl ChannelSet {
    pub fn indices(self) -> &'static [usize] {
        match self {
            ChannelSet::All => &[0, 1, 2, 3],
            ChannelSet::Rho => &[0],
            ChannelSet::P => &[1],
            ChannelSet::U => &[2, 3],
        }
    }
}

/// A value whose denominator may have been guarded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guarded {
    pub value: f64,
    /// True when the truth norm was below [`ERROR_EPSILON`].
    pub guarded: bool,
}

/// `||pred - truth||_2 / ||truth||_2` over the listed channels of any state.
pub fn relative_error_channels<S: State>(pred: &S, truth: &S, channels: &[usize]) -> Result<Guarded> {
    if pred.grid() != truth.grid() {
        return Err(Error::Shape("prediction and truth grids differ".into()));
    }
    let (mut diff, mut norm) = (0.0, 0.0);
    for &c in channels {
        for (a, b) in pred.channel(c).iter().zip(truth.channel(c)) {
            diff += (a - b) * (a - b);
            norm += b * b;
        }
    }
    let (diff, mut norm) = (diff.sqrt(), norm.sqrt());
    let guarded = norm < ERROR_EPSILON;
    if guarded {
        norm = ERROR_EPSILON;
    }
    Ok(Guarded {
        value: diff / norm,
        guarded,
    })
}

/// Relative L2 error of primitive states over a channel group.
pub fn relative_error(pred: &PrimitiveState, truth: &PrimitiveState, set: ChannelSet) -> Result<Guarded> {
    relative_error_channels(pred, truth, set.indices())
}

/// Pearson correlation of one channel over all cells; `None` when either
/// field has zero variance or fewer than two cells.
pub fn pearson_r<S: State>(pred: &S, truth: &S, channel: usize) -> Option<f64> {
    let (a, b) = (pred.channel(channel), truth.channel(channel));
    let n = a.len();
    if n < 2 || b.len() != n {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Unweighted mean of the defined per-channel correlations.
pub fn aggregate_correlation(per_channel: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_channel.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Number of leading entries at or above `threshold`. Undefined entries end
/// the run.
pub fn duration_from_series(series: &[Option<f64>], threshold: f64) -> usize {
    series
        .iter()
        .take_while(|r| matches!(r, Some(v) if *v >= threshold))
        .count()
}

/// A correction fallback tagged with its rollout step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEvent {
    pub step: usize,
    pub event: DegenerateEvent,
}

/// Per-step diagnostics of one rollout against its reference.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub sample: usize,
    /// Seed frame followed by predictions.
    pub predicted: Trajectory<PrimitiveState>,
    /// Seed frame followed by reference frames over the full horizon.
    pub truth: Trajectory<PrimitiveState>,
    /// Overall error at steps `1..=len`.
    pub overall_error: Vec<f64>,
    /// Error per [`ERROR_CHANNELS`] group at each step.
    pub channel_error: Vec<[f64; 3]>,
    /// Correlation per [`CORRELATION_CHANNELS`] at each step.
    pub correlation: Vec<[Option<f64>; 4]>,
    pub events: Vec<StepEvent>,
    /// First step whose prediction was not finite.
    pub diverged_at: Option<usize>,
    /// Steps whose truth norm needed the epsilon guard.
    pub guarded_steps: Vec<usize>,
    /// Cells clamped while converting predictions to primitives.
    pub clamped_cells: usize,
}

impl RolloutResult {
    /// Scores `predicted[1..]` against `truth[1..]`. Both start with the
    /// last seed frame; `predicted` may be shorter after a divergence.
    pub fn score(
        sample: usize,
        predicted: Trajectory<PrimitiveState>,
        truth: Trajectory<PrimitiveState>,
        events: Vec<StepEvent>,
        diverged_at: Option<usize>,
        clamped_cells: usize,
    ) -> Result<Self> {
        if predicted.len() > truth.len() {
            return Err(Error::Shape("prediction is longer than the reference".into()));
        }
        let steps = predicted.len().saturating_sub(1);
        let mut overall_error = Vec::with_capacity(steps);
        let mut channel_error = Vec::with_capacity(steps);
        let mut correlation = Vec::with_capacity(steps);
        let mut guarded_steps = Vec::new();
        for t in 1..=steps {
            let (p, q) = (&predicted.states[t], &truth.states[t]);
            let all = relative_error(p, q, ChannelSet::All)?;
            if all.guarded {
                guarded_steps.push(t);
            }
            overall_error.push(all.value);
            channel_error.push([
                relative_error(p, q, ChannelSet::Rho)?.value,
                relative_error(p, q, ChannelSet::P)?.value,
                relative_error(p, q, ChannelSet::U)?.value,
            ]);
            correlation.push([0, 1, 2, 3].map(|c| pearson_r(p, q, c)));
        }
        Ok(RolloutResult {
            sample,
            predicted,
            truth,
            overall_error,
            channel_error,
            correlation,
            events,
            diverged_at,
            guarded_steps,
            clamped_cells,
        })
    }

    /// Requested number of steps (length of the reference).
    pub fn horizon(&self) -> usize {
        self.truth.len() - 1
    }

    /// Per-step channel-mean correlation.
    pub fn aggregate_correlation(&self) -> Vec<Option<f64>> {
        self.correlation.iter().map(|r| aggregate_correlation(r)).collect()
    }
}

/// Steps before the channel-mean correlation first drops below `threshold`.
pub fn high_correlation_duration(result: &RolloutResult, threshold: f64) -> usize {
    duration_from_series(&result.aggregate_correlation(), threshold)
}

/// Cross-sample summary with the layout of an error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub samples: usize,
    pub horizon: usize,
    /// Mean over samples of each sample's mean error over its steps.
    pub avg_error: f64,
    /// `(T, mean error at step T)` over samples that reached `T`.
    pub error_at: Vec<(usize, Option<f64>)>,
    /// Mean over samples of the per-group average error (`rho, p, u`).
    pub channel_avg_error: [f64; 3],
    /// Mean error per step across samples, steps `1..=horizon`.
    pub mean_error_series: Vec<Option<f64>>,
    /// Least-squares slope of `mean_error_series` against the step index.
    pub error_growth_per_step: Option<f64>,
    pub mean_duration: f64,
    pub diverged: usize,
    pub degenerate_events: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Aggregates rollout results. Samples that diverged contribute the steps
/// they completed; a sample with no completed step counts as infinite error.
pub fn summarize(results: &[RolloutResult], horizons: &[usize], threshold: f64) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Empty("no rollout results to summarize".into()));
    }
    let horizon = results.iter().map(|r| r.horizon()).max().unwrap_or(0);
    let per_sample_avg: Vec<f64> = results
        .iter()
        .map(|r| {
            if r.overall_error.is_empty() {
                f64::INFINITY
            } else {
                mean(&r.overall_error)
            }
        })
        .collect();
    let mean_at = |t: usize| -> Option<f64> {
        let vals: Vec<f64> = results
            .iter()
            .filter_map(|r| r.overall_error.get(t.wrapping_sub(1)).copied())
            .collect();
        (!vals.is_empty() && t >= 1).then(|| mean(&vals))
    };
    let mut channel_avg_error = [0.0; 3];
    for (c, slot) in channel_avg_error.iter_mut().enumerate() {
        let vals: Vec<f64> = results
            .iter()
            .map(|r| {
                if r.channel_error.is_empty() {
                    f64::INFINITY
                } else {
                    r.channel_error.iter().map(|e| e[c]).sum::<f64>() / r.channel_error.len() as f64
                }
            })
            .collect();
        *slot = mean(&vals);
    }
    let mean_error_series: Vec<Option<f64>> = (1..=horizon).map(mean_at).collect();
    let points: Vec<(f64, f64)> = mean_error_series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| ((i + 1) as f64, v)))
        .collect();
    let durations: Vec<f64> = results
        .iter()
        .map(|r| high_correlation_duration(r, threshold) as f64)
        .collect();
    Ok(Report {
        samples: results.len(),
        horizon,
        avg_error: mean(&per_sample_avg),
        error_at: horizons.iter().map(|&t| (t, mean_at(t))).collect(),
        channel_avg_error,
        error_growth_per_step: slope(&points),
        mean_error_series,
        mean_duration: mean(&durations),
        diverged: results.iter().filter(|r| r.diverged_at.is_some()).count(),
        degenerate_events: results.iter().map(|r| r.events.len()).sum(),
    })
}
