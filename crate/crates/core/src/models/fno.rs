//! Fourier neural operator.
//!
//! lift -> depth x [GELU(spectral conv + linear skip), residual channel MLP]
//! -> spectral head -> pointwise projection to 4 channels.
//!
//! Everything after the last GELU is either a retained-mode spectral
//! convolution, a pointwise linear map or a per-channel affine, so the output
//! has no energy outside the retained mode set.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    coordinate_channels, finish_output, prepare_input, push_norm_params, spectral_conv, Cursor, OperatorConfig,
    ParamBuilder, ParamStore, StepOperator, STATE_CHANNELS,
};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::real::Real;
use crate::spectral::{ModeSet, SpectralPlan};
use crate::tensor::Tensor;

pub struct FnoOperator<T: Real> {
    config: OperatorConfig,
    params: ParamStore<T>,
    plan: Arc<SpectralPlan<T>>,
    coords: Arc<Tensor<T>>,
}

impl<T: Real> FnoOperator<T> {
    pub fn new(config: OperatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let modes = ModeSet::new(config.nx, config.ny, config.modes, config.mode_mask)?;
        let k = modes.len();
        let w = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        push_norm_params(&mut b, &config);
        b.linear("lift", w, config.input_channels());
        for l in 0..config.depth {
            b.spectral(&format!("block{l}.spectral"), w, w, k);
            b.linear(&format!("block{l}.skip"), w, w);
            b.linear(&format!("block{l}.mlp1"), w, w);
            b.linear(&format!("block{l}.mlp2"), w, w);
        }
        b.spectral("head.spectral", w, w, k);
        b.linear("project", STATE_CHANNELS, w);
        let params = b.store;
        Ok(FnoOperator {
            plan: Arc::new(SpectralPlan::new(modes)),
            coords: Arc::new(coordinate_channels(config.nx, config.ny)),
            config,
            params,
        })
    }

    pub fn plan(&self) -> &Arc<SpectralPlan<T>> {
        &self.plan
    }
}

impl<T: Real> StepOperator<T> for FnoOperator<T> {
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
        let mut p = Cursor::new(params);
        let (stacked, input) = prepare_input(g, &self.config, window, &self.coords, &mut p)?;
        let (lw, lb) = (p.next()?, p.next()?);
        let mut v = g.linear(input, lw, Some(lb))?;
        for _ in 0..self.config.depth {
            let (wr, wi) = (p.next()?, p.next()?);
            let s = spectral_conv(g, v, wr, wi, &self.plan)?;
            let (sw, sb) = (p.next()?, p.next()?);
            let k = g.linear(v, sw, Some(sb))?;
            let sum = g.add(s, k)?;
            v = g.gelu(sum);
            let (m1w, m1b, m2w, m2b) = (p.next()?, p.next()?, p.next()?, p.next()?);
            let h = g.linear(v, m1w, Some(m1b))?;
            let h = g.gelu(h);
            let h = g.linear(h, m2w, Some(m2b))?;
            v = g.add(v, h)?;
        }
        let (wr, wi) = (p.next()?, p.next()?);
        let head = spectral_conv(g, v, wr, wi, &self.plan)?;
        let (pw, pb) = (p.next()?, p.next()?);
        let raw = g.linear(head, pw, Some(pb))?;
        p.finish()?;
        finish_output(g, &self.config, raw, stacked)
    }
}
