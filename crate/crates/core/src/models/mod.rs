//! Learned step operators `G_theta` and the clip-then-correct step wrapper.
//!
//! An operator maps the `h` most recent conserved frames, each a `(4, nx, ny)`
//! tensor of `(rho, mom_x, mom_y, E)`, to a raw next frame. [`corrected_step`]
//! turns that raw output into a prediction: nonnegative channels are clipped
//! to the floor, then the [`CorrectionSpec`] is applied against the newest
//! input frame.

mod checkpoint;
mod dpot;
mod fno;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::correction::{CorrectionSpec, DegenerateEvent};
use crate::error::{Error, Result};
use crate::field::{ConservedState, POSITIVITY_FLOOR};
use crate::real::Real;
use crate::spectral::{ModeMask, SpectralPlan};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use dpot::DpotOperator;
pub use fno::FnoOperator;

/// Channels of a conserved frame.
pub const STATE_CHANNELS: usize = 4;

/// Clip mask: density and energy are nonnegative, momentum is signed.
pub const NONNEGATIVE_CHANNELS: [bool; STATE_CHANNELS] = [true, false, false, true];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Fno,
    Dpot,
    /// Returns the newest input frame; no parameters.
    Persistence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Internal,
    None,
}

/// Architecture and shape of a step operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    pub arch: Arch,
    pub nx: usize,
    pub ny: usize,
    /// Retained Fourier modes per direction.
    pub modes: usize,
    pub mode_mask: ModeMask,
    pub width: usize,
    pub depth: usize,
    /// DPOT patch edge length.
    pub patch_size: usize,
    /// DPOT channel groups in the Fourier attention.
    pub heads: usize,
    /// Input frames `h`.
    pub history: usize,
    pub channels: usize,
    pub clip_floor: f64,
    pub normalization: Normalization,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig {
            arch: Arch::Fno,
            nx: 64,
            ny: 64,
            modes: 12,
            mode_mask: ModeMask::Disk,
            width: 32,
            depth: 4,
            patch_size: 4,
            heads: 4,
            history: 2,
            channels: STATE_CHANNELS,
            clip_floor: POSITIVITY_FLOOR,
            normalization: Normalization::Internal,
        }
    }
}

impl OperatorConfig {
    /// Full-resolution setting: 128x128 grid, 32 modes, patch 4. Width and
    /// depth are guesses; parameter counts of published models are not matched.
    pub fn full_scale(arch: Arch) -> Self {
        OperatorConfig {
            arch,
            nx: 128,
            ny: 128,
            modes: 32,
            width: 64,
            depth: 4,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::config("operator.nx", "grid needs at least 4 cells per side"));
        }
        if self.channels != STATE_CHANNELS {
            return Err(Error::config("operator.channels", "conserved frames have exactly 4 channels"));
        }
        if !(1..=2).contains(&self.history) {
            return Err(Error::config("operator.history", "must be 1 or 2"));
        }
        if !(self.clip_floor.is_finite() && self.clip_floor >= 0.0) {
            return Err(Error::config("operator.clip_floor", "must be finite and nonnegative"));
        }
        if self.arch == Arch::Persistence {
            return Ok(());
        }
        if self.modes == 0 || self.modes > self.nx / 2 || self.modes > self.ny / 2 {
            return Err(Error::config(
                "operator.modes",
                format!("{} exceeds the Nyquist limit of a {}x{} grid", self.modes, self.nx, self.ny),
            ));
        }
        if self.width == 0 || self.depth == 0 {
            return Err(Error::config("operator.width", "width and depth must be positive"));
        }
        if self.arch == Arch::Dpot {
            let p = self.patch_size;
            if p == 0 || self.nx % p != 0 || self.ny % p != 0 {
                return Err(Error::config(
                    "operator.patch_size",
                    format!("{p} does not divide the {}x{} grid", self.nx, self.ny),
                ));
            }
            if self.nx / p < 2 || self.ny / p < 2 {
                return Err(Error::config("operator.patch_size", "token grid must be at least 2x2"));
            }
            if self.heads == 0 || self.width % self.heads != 0 {
                return Err(Error::config("operator.heads", "must divide width"));
            }
        }
        Ok(())
    }

    /// Input channels after stacking history and appending coordinates.
    pub fn input_channels(&self) -> usize {
        self.history * STATE_CHANNELS + 2
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(Arc::new(t));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Tensor<T>>] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    /// Mutable access; copies the tensor first if a graph still shares it.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }

    /// Registers every tensor in `g`, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(Arc::clone(t))
                } else {
                    g.constant_shared(Arc::clone(t))
                }
            })
            .collect()
    }
}

/// Allocates parameters in the order an operator's forward pass consumes them.
pub(crate) struct ParamBuilder<'a, T: Real> {
    pub store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng,
        }
    }

    fn uniform(&mut self, name: String, shape: &[usize], lo: f64, hi: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect::<Vec<f64>>();
        self.store
            .push(name, Tensor::from_f64(shape, &data).expect("shape matches data"));
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.store.push(name, Tensor::full(shape, T::from_f64_lossy(value)));
    }

    /// Weight `(out, in)` then bias `(out)`, both `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn linear(&mut self, name: &str, out: usize, inp: usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        self.uniform(format!("{name}.weight"), &[out, inp], -bound, bound);
        self.uniform(format!("{name}.bias"), &[out], -bound, bound);
    }

    /// Real and imaginary `(in, out, K)` mode weights, `U[0, 1) / (in * out)`.
    pub fn spectral(&mut self, name: &str, inp: usize, out: usize, k: usize) {
        let scale = 1.0 / (inp * out) as f64;
        self.uniform(format!("{name}.weight_re"), &[inp, out, k], 0.0, scale);
        self.uniform(format!("{name}.weight_im"), &[inp, out, k], 0.0, scale);
    }

    pub fn fill_uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        self.uniform(name, shape, -bound, bound);
    }
}

/// Hands out bound parameter handles in creation order.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, pos: 0 }
    }

    pub fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Shape("operator consumed more parameters than it owns".into()))?;
        self.pos += 1;
        Ok(v)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.vars.len() {
            return Err(Error::Shape(format!(
                "operator used {} of {} parameters",
                self.pos,
                self.vars.len()
            )));
        }
        Ok(())
    }
}

/// A learned map from the `h` newest frames to a raw next frame.
pub trait StepOperator<T: Real>: Send + Sync {
    fn config(&self) -> &OperatorConfig;

    fn params(&self) -> &ParamStore<T>;

    fn params_mut(&mut self) -> &mut ParamStore<T>;

    /// Raw `(4, nx, ny)` output for `window` (oldest first, each `(4, nx, ny)`);
    /// `params` are this operator's parameters bound in `g`.
    fn forward(&self, g: &mut Graph<T>, window: &[Var], params: &[Var]) -> Result<Var>;
}

pub type Operator<T> = Box<dyn StepOperator<T>>;

/// Identity on the newest frame.
pub struct Persistence<T: Real> {
    config: OperatorConfig,
    params: ParamStore<T>,
}

impl<T: Real> Persistence<T> {
    pub fn new(config: OperatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Persistence {
            config,
            params: ParamStore::new(),
        })
    }
}

impl<T: Real> StepOperator<T> for Persistence<T> {
    fn config(&self) -> &OperatorConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, window: &[Var], _params: &[Var]) -> Result<Var> {
        let last = *window.last().ok_or_else(|| Error::Empty("empty input window".into()))?;
        // a distinct node so downstream ops never alias the input frame
        Ok(g.scale(last, T::one()))
    }
}

/// Builds an operator with parameters drawn from `seed`.
pub fn build_operator<T: Real>(config: &OperatorConfig, seed: u64) -> Result<Operator<T>> {
    config.validate()?;
    Ok(match config.arch {
        Arch::Fno => Box::new(FnoOperator::new(config.clone(), seed)?),
        Arch::Dpot => Box::new(DpotOperator::new(config.clone(), seed)?),
        Arch::Persistence => Box::new(Persistence::new(config.clone())?),
    })
}

/// `(2, nx, ny)` cell-centre coordinates in `[0, 1]`.
pub(crate) fn coordinate_channels<T: Real>(nx: usize, ny: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * nx * ny);
    for i in 0..nx {
        for _ in 0..ny {
            data.push((i as f64 + 0.5) / nx as f64);
        }
    }
    for _ in 0..nx {
        for j in 0..ny {
            data.push((j as f64 + 0.5) / ny as f64);
        }
    }
    Tensor::from_f64(&[2, nx, ny], &data).expect("coordinate shape")
}

/// Stacks the window, normalizes it and appends coordinates. Returns the
/// stacked raw window (used for de-normalization) and the model input.
pub(crate) fn prepare_input<T: Real>(
    g: &mut Graph<T>,
    config: &OperatorConfig,
    window: &[Var],
    coords: &Arc<Tensor<T>>,
    cursor: &mut Cursor<'_>,
) -> Result<(Var, Var)> {
    if window.len() != config.history {
        return Err(Error::Shape(format!(
            "operator expects {} input frames, got {}",
            config.history,
            window.len()
        )));
    }
    for w in window {
        if g.value(*w).shape() != [STATE_CHANNELS, config.nx, config.ny] {
            return Err(Error::Shape(format!(
                "input frame {:?} does not match the operator grid {}x{}",
                g.value(*w).shape(),
                config.nx,
                config.ny
            )));
        }
    }
    let stacked = g.concat(window)?;
    let features = match config.normalization {
        Normalization::Internal => {
            let gamma = cursor.next()?;
            let beta = cursor.next()?;
            g.instance_norm(stacked, gamma, beta)?
        }
        Normalization::None => stacked,
    };
    let c = g.constant_shared(Arc::clone(coords));
    Ok((stacked, g.concat(&[features, c])?))
}

/// Adds the normalization affine parameters when enabled.
pub(crate) fn push_norm_params<T: Real>(b: &mut ParamBuilder<'_, T>, config: &OperatorConfig) {
    if config.normalization == Normalization::Internal {
        let c = config.history * STATE_CHANNELS;
        b.constant("norm.gamma".into(), &[c], 1.0);
        b.constant("norm.beta".into(), &[c], 0.0);
    }
}

/// Undoes the input normalization using the newest frame's statistics.
pub(crate) fn finish_output<T: Real>(g: &mut Graph<T>, config: &OperatorConfig, raw: Var, stacked: Var) -> Result<Var> {
    match config.normalization {
        Normalization::Internal => g.denormalize(raw, stacked, (config.history - 1) * STATE_CHANNELS),
        Normalization::None => Ok(raw),
    }
}

/// `ifft(mix(fft(x)))`: FFT, keep the retained modes, per-mode complex
/// channel mixing with `(in, out, K)` weights, inverse FFT.
pub fn spectral_conv<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    weight_re: Var,
    weight_im: Var,
    plan: &Arc<SpectralPlan<T>>,
) -> Result<Var> {
    let z = g.fft_retain(x, plan)?;
    let y = g.mode_mix(z, weight_re, weight_im)?;
    g.ifft_scatter(y, plan)
}

/// Clamps density and energy to `floor`; momentum is untouched.
pub fn clip_nonnegative<T: Real>(g: &mut Graph<T>, raw: Var, floor: f64) -> Result<Var> {
    g.clip_min(raw, T::from_f64_lossy(floor), &NONNEGATIVE_CHANNELS)
}

/// One prediction `T(G)(window)`: operator, clip, then correction against
/// the newest window frame when `spec` is given.
pub fn corrected_step<T: Real>(
    op: &dyn StepOperator<T>,
    g: &mut Graph<T>,
    window: &[Var],
    params: &[Var],
    spec: Option<&CorrectionSpec>,
) -> Result<Var> {
    let raw = op.forward(g, window, params)?;
    let clipped = clip_nonnegative(g, raw, op.config().clip_floor)?;
    match spec {
        Some(spec) if spec.is_enabled() => {
            let reference = *window.last().ok_or_else(|| Error::Empty("empty input window".into()))?;
            g.correct(clipped, reference, &spec.modes(), spec.denominator_epsilon)
        }
        _ => Ok(clipped),
    }
}

/// Inference for one step on double-precision frames. Returns the prediction
/// as a tensor in the working precision plus any correction fallbacks.
pub fn predict<T: Real>(
    op: &dyn StepOperator<T>,
    window: &[Tensor<T>],
    spec: Option<&CorrectionSpec>,
) -> Result<(Tensor<T>, Vec<DegenerateEvent>)> {
    let mut g = Graph::new();
    let params = op.params().bind(&mut g, false);
    let frames: Vec<Var> = window.iter().map(|w| g.constant(w.clone())).collect();
    let out = corrected_step(op, &mut g, &frames, &params, spec)?;
    let events = g.events().to_vec();
    let value = Arc::try_unwrap(g.shared_value(out)).unwrap_or_else(|a| (*a).clone());
    Ok((value, events))
}

/// Raw operator output for a window of conserved states (no clip, no correction).
pub fn raw_output<T: Real>(op: &dyn StepOperator<T>, window: &[ConservedState]) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let params = op.params().bind(&mut g, false);
    let frames: Vec<Var> = window.iter().map(|s| g.constant(Tensor::from_state(s))).collect();
    let out = op.forward(&mut g, &frames, &params)?;
    Ok(g.value(out).clone())
}
