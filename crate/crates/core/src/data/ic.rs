//! Random band-limited initial conditions.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid2D, PrimitiveState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcConfig {
    /// Largest retained wavenumber magnitude (in units of `2 pi / L`).
    pub max_wavenumber: f64,
    pub base_density: f64,
    pub base_pressure: f64,
    /// Peak relative perturbation of density and pressure; below 1 keeps both positive.
    pub density_amplitude: f64,
    pub pressure_amplitude: f64,
}

impl Default for IcConfig {
    fn default() -> Self {
        IcConfig {
            max_wavenumber: 4.0,
            base_density: 1.0,
            base_pressure: 1.0,
            density_amplitude: 0.2,
            pressure_amplitude: 0.2,
        }
    }
}

impl IcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_wavenumber >= 1.0) {
            return Err(Error::config("ic.max_wavenumber", "must be at least 1"));
        }
        if !(self.base_density > 0.0 && self.base_pressure > 0.0) {
            return Err(Error::config("ic.base_density", "base density and pressure must be positive"));
        }
        for (name, a) in [
            ("ic.density_amplitude", self.density_amplitude),
            ("ic.pressure_amplitude", self.pressure_amplitude),
        ] {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Draws initial states from a seeded generator.
pub struct IcSampler {
    cfg: IcConfig,
    grid: Grid2D,
    mach: f64,
    rng: ChaCha8Rng,
}

impl IcSampler {
    pub fn new(cfg: IcConfig, grid: Grid2D, mach: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if !(mach.is_finite() && mach >= 0.0) {
            return Err(Error::config("solver.mach_target", "must be nonnegative"));
        }
        Ok(IcSampler {
            cfg,
            grid,
            mach,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Random zero-mean field with all Fourier content at `0 < |k| <= kmax`,
    /// scaled to unit peak magnitude.
    fn band_limited(&mut self) -> Vec<f64> {
        let kmax = self.cfg.max_wavenumber;
        let km = kmax.floor() as i64;
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut waves = Vec::new();
        for kx in 0..=km {
            for ky in -km..=km {
                // one representative of each +-k pair
                if kx == 0 && ky <= 0 {
                    continue;
                }
                let mag = ((kx * kx + ky * ky) as f64).sqrt();
                if mag > kmax || 2 * kx.unsigned_abs() as usize >= nx || 2 * ky.unsigned_abs() as usize >= ny {
                    continue;
                }
                let amp = self.rng.gen_range(-1.0..1.0) / mag;
                let phase = self.rng.gen_range(0.0..2.0 * PI);
                waves.push((kx as f64, ky as f64, amp, phase));
            }
        }
        let mut f = vec![0.0; nx * ny];
        for i in 0..nx {
            let x = (i as f64 + 0.5) / nx as f64;
            for j in 0..ny {
                let y = (j as f64 + 0.5) / ny as f64;
                f[i * ny + j] = waves
                    .iter()
                    .map(|&(kx, ky, a, ph)| a * (2.0 * PI * (kx * x + ky * y) + ph).cos())
                    .sum();
            }
        }
        let peak = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            f.iter_mut().for_each(|v| *v /= peak);
        }
        f
    }

    /// Next initial condition. The velocity field is rescaled so the rms
    /// Mach number equals the target exactly.
    pub fn sample(&mut self) -> Result<PrimitiveState> {
        let fr = self.band_limited();
        let fp = self.band_limited();
        let fu = self.band_limited();
        let fv = self.band_limited();
        let c = &self.cfg;
        let rho: Vec<f64> = fr.iter().map(|v| c.base_density * (1.0 + c.density_amplitude * v)).collect();
        let p: Vec<f64> = fp.iter().map(|v| c.base_pressure * (1.0 + c.pressure_amplitude * v)).collect();
        let mut state = PrimitiveState::new(self.grid, rho, p, [fu, fv])?;
        let current = state.rms_mach();
        let scale = if current > 0.0 { self.mach / current } else { 0.0 };
        for comp in state.u.iter_mut() {
            comp.iter_mut().for_each(|v| *v *= scale);
        }
        Ok(state)
    }
}
