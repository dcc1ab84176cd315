use crate::autograd::{Graph, Var};
use crate::correction::CorrectionSpec;
use crate::error::{Error, Result};
use crate::field::State;
use crate::models::{corrected_step, StepOperator};
use crate::real::Real;
use crate::tensor::Tensor;

/// Denominator guard of the relative terms.
pub const LOSS_EPSILON: f64 = 1e-12;

/// Value of the rollout loss with the steps whose truth norm was guarded.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub guarded_steps: Vec<usize>,
}

/// `sum_i ||pred_i - truth_i||_2 / ||truth_i||_2` over all channels and cells,
/// `i = 0..len`. Index 0 is the seed frame.
pub fn rollout_loss<S: State>(pred: &[S], truth: &[S]) -> Result<LossValue> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "rollout loss needs equal nonempty sequences, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut value = 0.0;
    let mut guarded_steps = Vec::new();
    for (i, (p, q)) in pred.iter().zip(truth).enumerate() {
        if p.grid() != q.grid() {
            return Err(Error::Shape(format!("step {i}: grids differ")));
        }
        let (mut diff, mut norm) = (0.0, 0.0);
        for c in 0..S::CHANNELS.len() {
            for (a, b) in p.channel(c).iter().zip(q.channel(c)) {
                diff += (a - b) * (a - b);
                norm += b * b;
            }
        }
        let mut norm = norm.sqrt();
        if norm < LOSS_EPSILON {
            norm = LOSS_EPSILON;
            guarded_steps.push(i);
        }
        value += diff.sqrt() / norm;
    }
    Ok(LossValue { value, guarded_steps })
}

/// Rollout loss inside a graph.
pub struct GraphLoss {
    pub loss: Var,
    /// Per-step terms, `i = 0..=tau`.
    pub terms: Vec<Var>,
    pub predictions: Vec<Var>,
}

/// Builds the `tau`-step rollout from the first `h` of `frames` and the loss
/// against the following frames. `frames` holds `h + tau` frames.
pub fn rollout_loss_graph<T: Real>(
    op: &dyn StepOperator<T>,
    g: &mut Graph<T>,
    params: &[Var],
    frames: &[Tensor<T>],
    tau: usize,
    spec: Option<&CorrectionSpec>,
) -> Result<GraphLoss> {
    let h = op.config().history;
    if frames.len() != h + tau || tau == 0 {
        return Err(Error::Shape(format!(
            "need {} frames for history {h} and {tau} steps, got {}",
            h + tau,
            frames.len()
        )));
    }
    let vars: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
    let mut window: Vec<Var> = vars[..h].to_vec();
    let mut terms = vec![g.relative_l2(vars[h - 1], vars[h - 1])?];
    let mut predictions = Vec::with_capacity(tau);
    for i in 1..=tau {
        let pred = corrected_step(op, g, &window, params, spec)?;
        terms.push(g.relative_l2(pred, vars[h - 1 + i])?);
        predictions.push(pred);
        window.remove(0);
        window.push(pred);
    }
    let loss = g.sum_scalars(&terms)?;
    Ok(GraphLoss {
        loss,
        terms,
        predictions,
    })
}
