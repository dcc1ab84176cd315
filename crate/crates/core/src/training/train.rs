use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::rollout_loss_graph;
use super::schedule::OneCycle;
use super::TrainConfig;
use crate::autograd::Graph;
use crate::correction::CorrectionSpec;
use crate::error::{Error, Result};
use crate::field::{ConservedState, Trajectory};
use crate::models::{save_checkpoint, StepOperator};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean rollout loss of the samples seen this epoch.
    pub loss: f64,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
    pub aborted: bool,
}

/// Snapshot taken when a batch produced a non-finite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NanDiagnostic {
    pub epoch: usize,
    pub batch: usize,
    /// `(trajectory index, window start)` of the offending sample.
    pub sample: (usize, usize),
    /// First rollout step whose loss term was not finite.
    pub step: Option<usize>,
    pub param_norm: f64,
    /// Mean and max |value| of the sample's input frames.
    pub input_mean: f64,
    pub input_max_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub diagnostics: Vec<NanDiagnostic>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

struct SampleOutcome {
    loss: f64,
    step_losses: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

fn window_frames<T: Real>(traj: &Trajectory<ConservedState>, start: usize, len: usize) -> Vec<Tensor<T>> {
    traj.states[start..start + len].iter().map(Tensor::from_state).collect()
}

fn sample_gradient<T: Real>(
    op: &dyn StepOperator<T>,
    frames: &[Tensor<T>],
    tau: usize,
    spec: Option<&CorrectionSpec>,
) -> Result<SampleOutcome> {
    let mut g = Graph::new();
    let params = op.params().bind(&mut g, true);
    let built = rollout_loss_graph(op, &mut g, &params, frames, tau, spec)?;
    let loss = g.value(built.loss).data()[0].to_f64_lossy();
    let step_losses = built
        .terms
        .iter()
        .map(|t| g.value(*t).data()[0].to_f64_lossy())
        .collect();
    if !loss.is_finite() {
        return Ok(SampleOutcome {
            loss,
            step_losses,
            grads: Vec::new(),
        });
    }
    let mut grads = g.backward(built.loss);
    let grads = params
        .iter()
        .zip(op.params().tensors())
        .map(|(v, t)| match grads.take(*v) {
            Some(gv) => gv.into_iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; t.len()],
        })
        .collect();
    Ok(SampleOutcome {
        loss,
        step_losses,
        grads,
    })
}

/// Trains `op` in place on windows drawn from `dataset`.
///
/// Each epoch draws one window start per trajectory uniformly at random,
/// shuffles the trajectories and walks them in batches. Per-sample gradients
/// are computed in parallel and reduced in sample order, so results are
/// independent of the thread count.
pub fn train<T: Real>(
    op: &mut dyn StepOperator<T>,
    dataset: &[Trajectory<ConservedState>],
    cfg: &TrainConfig,
    spec: &CorrectionSpec,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    spec.validate()?;
    let h = op.config().history;
    let tau = cfg.rollout_steps;
    let span = h + tau;
    if dataset.is_empty() {
        return Err(Error::Empty("training set has no trajectories".into()));
    }
    if let Some(i) = dataset.iter().position(|t| t.len() < span) {
        return Err(Error::format(
            format!("trajectory {i}"),
            format!("has {} frames, training windows need {span}", dataset[i].len()),
        ));
    }
    let step_spec = spec.in_training_graph.then_some(spec);
    let schedule = OneCycle {
        peak: cfg.peak_lr,
        warmup_epochs: cfg.warmup_epochs as f64,
        total_epochs: cfg.epochs as f64,
        initial_divisor: cfg.initial_lr_divisor,
        final_fraction: cfg.final_lr_fraction,
    };
    let mut adam = Adam::new(cfg.betas[0], cfg.betas[1], cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let started = Instant::now();
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<(usize, usize)> = dataset
            .iter()
            .enumerate()
            .map(|(i, t)| (i, rng.gen_range(0..=t.len() - span)))
            .collect();
        order.shuffle(&mut rng);
        let lr_epoch = schedule.lr(epoch as f64);
        let (mut loss_sum, mut seen, mut aborted) = (0.0, 0usize, false);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = schedule.lr(epoch as f64 + b as f64 / batches_per_epoch as f64);
            let op_ref: &dyn StepOperator<T> = &*op;
            let outcomes: Vec<Result<SampleOutcome>> = batch
                .par_iter()
                .map(|&(i, s)| sample_gradient(op_ref, &window_frames(&dataset[i], s, span), tau, step_spec))
                .collect();
            let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
            if let Some(bad) = outcomes
                .iter()
                .position(|o| !o.loss.is_finite() || o.grads.iter().flatten().any(|g| !g.is_finite()))
            {
                let (i, s) = batch[bad];
                let frames = window_frames::<f64>(&dataset[i], s, h);
                let n: usize = frames.iter().map(|f| f.len()).sum();
                let diag = NanDiagnostic {
                    epoch: epoch + 1,
                    batch: b,
                    sample: (i, s),
                    step: outcomes[bad].step_losses.iter().position(|l| !l.is_finite()),
                    param_norm: op.params().l2_norm(),
                    input_mean: frames.iter().flat_map(|f| f.data()).sum::<f64>() / n as f64,
                    input_max_abs: frames.iter().flat_map(|f| f.data()).fold(0.0, |m, v| m.max(v.abs())),
                };
                log::error!("non-finite loss, aborting epoch {}: {diag:?}", epoch + 1);
                history.diagnostics.push(diag);
                aborted = true;
                break;
            }
            let count = outcomes.len() as f64;
            let mut grads: Vec<Vec<f64>> = op.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for o in &outcomes {
                loss_sum += o.loss;
                seen += 1;
                for (acc, g) in grads.iter_mut().zip(&o.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v / count);
                }
            }
            adam.update(op.params_mut(), &grads, lr);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            lr: lr_epoch,
            wall_time: started.elapsed().as_secs_f64(),
            aborted,
        };
        log::info!("epoch {} loss {:.6} lr {:.3e}", record.epoch, record.loss, record.lr);
        history.epochs.push(record);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_epoch{:04}.ckpt", epoch + 1));
                save_checkpoint(&path, &*op, serde_json::json!({ "epoch": epoch + 1 }))?;
            }
        }
    }
    Ok(history)
}
