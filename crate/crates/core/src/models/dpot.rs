//! DPOT-style operator: patch encoding, Fourier attention layers, patch
//! decoding.
//!
//! Fourier attention on the token grid: FFT -> grouped complex linear ->
//! GELU -> grouped complex linear -> softmax mixing across channel groups ->
//! inverse FFT, added back to the tokens, followed by a residual pointwise
//! MLP. The decoder maps each token to a full `p x p` patch, so the output
//! can carry energy at any wavenumber.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    coordinate_channels, finish_output, prepare_input, push_norm_params, Cursor, OperatorConfig, ParamBuilder,
    ParamStore, StepOperator, STATE_CHANNELS,
};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::real::Real;
use crate::spectral::{ModeSet, SpectralPlan};
use crate::tensor::Tensor;

/// Initial diagonal logit of the group-mixing softmax.
const MIX_DIAGONAL: f64 = 3.0;

pub struct DpotOperator<T: Real> {
    config: OperatorConfig,
    params: ParamStore<T>,
    plan: Arc<SpectralPlan<T>>,
    coords: Arc<Tensor<T>>,
}

impl<T: Real> DpotOperator<T> {
    pub fn new(config: OperatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let p = config.patch_size;
        let (tx, ty) = (config.nx / p, config.ny / p);
        let token_modes = config.modes.min(tx / 2).min(ty / 2);
        let modes = ModeSet::new(tx, ty, token_modes, config.mode_mask)?;
        let (d, groups) = (config.width, config.heads);
        let block = d / groups;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        push_norm_params(&mut b, &config);
        b.linear("embed", d, config.input_channels() * p * p);
        for l in 0..config.depth {
            let bound = 1.0 / (block as f64).sqrt();
            for k in 1..=2 {
                b.fill_uniform(format!("layer{l}.attn{k}.weight"), &[2, groups, block, block], bound);
                b.constant(format!("layer{l}.attn{k}.bias"), &[2, groups, block], 0.0);
            }
            let mut logits = vec![0.0; groups * groups];
            for i in 0..groups {
                logits[i * groups + i] = MIX_DIAGONAL;
            }
            b.store.push(
                format!("layer{l}.mix.logits"),
                Tensor::from_f64(&[groups, groups], &logits)?,
            );
            b.linear(&format!("layer{l}.mlp1"), d, d);
            b.linear(&format!("layer{l}.mlp2"), d, d);
        }
        b.linear("decode", STATE_CHANNELS * p * p, d);
        let params = b.store;
        Ok(DpotOperator {
            plan: Arc::new(SpectralPlan::new(modes)),
            coords: Arc::new(coordinate_channels(config.nx, config.ny)),
            config,
            params,
        })
    }

    /// Retained modes on the token grid.
    pub fn token_plan(&self) -> &Arc<SpectralPlan<T>> {
        &self.plan
    }
}

impl<T: Real> StepOperator<T> for DpotOperator<T> {
    fn config(&self) -> &OperatorConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, window: &[Var], params: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let mut p = Cursor::new(params);
        let (stacked, input) = prepare_input(g, cfg, window, &self.coords, &mut p)?;
        let tokens = g.patchify(input, cfg.patch_size)?;
        let (ew, eb) = (p.next()?, p.next()?);
        let mut v = g.linear(tokens, ew, Some(eb))?;
        for _ in 0..cfg.depth {
            let z = g.fft_retain(v, &self.plan)?;
            let (w1, b1) = (p.next()?, p.next()?);
            let z = g.complex_block_linear(z, w1, b1, cfg.heads)?;
            let z = g.gelu(z);
            let (w2, b2) = (p.next()?, p.next()?);
            let z = g.complex_block_linear(z, w2, b2, cfg.heads)?;
            let logits = p.next()?;
            let z = g.block_mix(z, logits, cfg.heads)?;
            let s = g.ifft_scatter(z, &self.plan)?;
            v = g.add(v, s)?;
            let (m1w, m1b, m2w, m2b) = (p.next()?, p.next()?, p.next()?, p.next()?);
            let h = g.linear(v, m1w, Some(m1b))?;
            let h = g.gelu(h);
            let h = g.linear(h, m2w, Some(m2b))?;
            v = g.add(v, h)?;
        }
        let (dw, db) = (p.next()?, p.next()?);
        let patches = g.linear(v, dw, Some(db))?;
        let raw = g.unpatchify(patches, cfg.patch_size)?;
        p.finish()?;
        finish_output(g, cfg, raw, stacked)
    }
}
