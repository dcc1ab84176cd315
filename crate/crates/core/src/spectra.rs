//! Radial power spectra and spectral-cutoff diagnostics.
//!
//! Normalization: with `X = FFT(f)` unnormalized on `N = nx * ny` cells the
//! density of a mode is `|X_k|^2 / N^2`, so by Parseval the densities of all
//! modes sum to the mean square of the field. Each mode goes to shell
//! `round(sqrt(kx^2 + ky^2))` over signed integer frequencies; shells above
//! `k_max = floor(min(nx, ny) / 2)` (the grid corners) are pooled into a
//! separate overflow bin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{PrimitiveState, State, Trajectory};
use crate::spectral::{fft2, signed_frequency};

pub const NORMALIZATION: &str = "density |X_k|^2/N^2 binned by round(|k|); sum(bins)+overflow = mean(f^2)";

/// Default fraction of the total below which a spectral tail counts as empty.
pub const CUTOFF_FRACTION: f64 = 1e-6;

/// Floor applied before taking logarithms for plots.
pub const LOG_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Shell index `k = 0..=k_max`.
    pub k: Vec<usize>,
    pub density: Vec<f64>,
    /// Density of modes with rounded `|k| > k_max`.
    pub overflow: f64,
    pub normalization: String,
    pub channel: String,
    pub t: Option<usize>,
}

impl SpectrumResult {
    pub fn k_max(&self) -> usize {
        self.k.len() - 1
    }

    /// Bins plus overflow; equals the field's mean square.
    pub fn total(&self) -> f64 {
        self.density.iter().sum::<f64>() + self.overflow
    }

    /// Fraction of the total above `shell`, overflow included.
    pub fn fraction_above(&self, shell: usize) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let tail: f64 = self.density.iter().skip(shell + 1).sum::<f64>() + self.overflow;
        tail / total
    }

    /// Smallest shell `s` such that the density in shells `> s` (overflow
    /// excluded) is below `fraction` of the total.
    pub fn cutoff(&self, fraction: f64) -> usize {
        let total = self.total();
        if total <= 0.0 {
            return 0;
        }
        let mut tail = 0.0;
        for s in (0..self.density.len()).rev() {
            if tail + self.density[s] >= fraction * total {
                return s;
            }
            tail += self.density[s];
        }
        0
    }
}

/// Named field for spectral analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumChannel {
    Tke,
    Rho,
    P,
    #[serde(rename = "u_x")]
    Ux,
    #[serde(rename = "u_y")]
    Uy,
}

impl SpectrumChannel {
    pub fn name(self) -> &'static str {
        match self {
            SpectrumChannel::Tke => "tke",
            SpectrumChannel::Rho => "rho",
            SpectrumChannel::P => "p",
            SpectrumChannel::Ux => "u_x",
            SpectrumChannel::Uy => "u_y",
        }
    }

    pub fn extract(self, s: &PrimitiveState) -> Vec<f64> {
        match self {
            SpectrumChannel::Tke => tke_field(s),
            SpectrumChannel::Rho => s.rho.clone(),
            SpectrumChannel::P => s.p.clone(),
            SpectrumChannel::Ux => s.u[0].clone(),
            SpectrumChannel::Uy => s.u[1].clone(),
        }
    }
}

impl std::str::FromStr for SpectrumChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tke" => SpectrumChannel::Tke,
            "rho" => SpectrumChannel::Rho,
            "p" => SpectrumChannel::P,
            "u_x" => SpectrumChannel::Ux,
            "u_y" => SpectrumChannel::Uy,
            other => {
                return Err(Error::config(
                    "spectra.channel",
                    format!("unknown channel {other:?}; expected tke, rho, p, u_x or u_y"),
                ))
            }
        })
    }
}

/// `rho |u|^2 / 2` cellwise.
pub fn tke_field(s: &PrimitiveState) -> Vec<f64> {
    s.rho
        .iter()
        .zip(s.u[0].iter().zip(&s.u[1]))
        .map(|(r, (ux, uy))| 0.5 * r * (ux * ux + uy * uy))
        .collect()
}

/// Shell index of every FFT coefficient; values above `k_max` mean overflow.
fn shell(ix: usize, iy: usize, nx: usize, ny: usize) -> usize {
    let kx = signed_frequency(ix, nx) as f64;
    let ky = signed_frequency(iy, ny) as f64;
    (kx * kx + ky * ky).sqrt().round() as usize
}

pub fn radial_spectrum(field: &[f64], nx: usize, ny: usize) -> Result<SpectrumResult> {
    if field.len() != nx * ny || nx == 0 || ny == 0 {
        return Err(Error::Shape(format!("field of {} values on {nx}x{ny}", field.len())));
    }
    let k_max = nx.min(ny) / 2;
    let spec = fft2(field, nx, ny);
    let n2 = ((nx * ny) as f64).powi(2);
    let mut density = vec![0.0; k_max + 1];
    let mut overflow = 0.0;
    for ix in 0..nx {
        for iy in 0..ny {
            let e = spec[ix * ny + iy].norm_sqr() / n2;
            match shell(ix, iy, nx, ny) {
                s if s <= k_max => density[s] += e,
                _ => overflow += e,
            }
        }
    }
    Ok(SpectrumResult {
        k: (0..=k_max).collect(),
        density,
        overflow,
        normalization: NORMALIZATION.into(),
        channel: String::new(),
        t: None,
    })
}

/// One spectrum per frame of `channel`.
pub fn spectrum_vs_time(traj: &Trajectory<PrimitiveState>, channel: SpectrumChannel) -> Result<Vec<SpectrumResult>> {
    let g = traj.grid;
    traj.states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let mut r = radial_spectrum(&channel.extract(s), g.nx, g.ny)?;
            r.channel = channel.name().into();
            r.t = Some(t);
            Ok(r)
        })
        .collect()
}

/// Spectrum of a named channel of any state, frame by frame.
pub fn state_spectra<S: State>(states: &[S], channel: usize) -> Result<Vec<SpectrumResult>> {
    states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let g = s.grid();
            let mut r = radial_spectrum(s.channel(channel), g.nx, g.ny)?;
            r.channel = S::CHANNELS[channel].into();
            r.t = Some(t);
            Ok(r)
        })
        .collect()
}

/// `(time x shell)` density matrix for heat maps.
pub fn spectrum_matrix(series: &[SpectrumResult]) -> Vec<Vec<f64>> {
    series.iter().map(|s| s.density.clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffReport {
    pub channel: String,
    pub fraction: f64,
    pub predicted: Vec<usize>,
    pub truth: Vec<usize>,
    pub predicted_max: usize,
    pub truth_max: usize,
}

/// Per-frame cutoff shells of a prediction and its reference.
pub fn spectral_cutoff_report(
    predicted: &Trajectory<PrimitiveState>,
    truth: &Trajectory<PrimitiveState>,
    channel: SpectrumChannel,
    fraction: f64,
) -> Result<CutoffReport> {
    let cut = |t: &Trajectory<PrimitiveState>| -> Result<Vec<usize>> {
        Ok(spectrum_vs_time(t, channel)?.iter().map(|s| s.cutoff(fraction)).collect())
    };
    let (p, q) = (cut(predicted)?, cut(truth)?);
    Ok(CutoffReport {
        channel: channel.name().into(),
        fraction,
        predicted_max: p.iter().copied().max().unwrap_or(0),
        truth_max: q.iter().copied().max().unwrap_or(0),
        predicted: p,
        truth: q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_of_a_known_profile() {
        let s = SpectrumResult {
            k: (0..=4).collect(),
            density: vec![1.0, 0.5, 0.25, 0.0, 0.0],
            overflow: 0.0,
            normalization: NORMALIZATION.into(),
            channel: "x".into(),
            t: None,
        };
        assert_eq!(s.cutoff(1e-6), 2);
        assert_eq!(s.fraction_above(2), 0.0);
        assert!((s.fraction_above(0) - 0.75 / 1.75).abs() < 1e-15);
    }

    #[test]
    fn channel_names_parse() {
        for c in ["tke", "rho", "p", "u_x", "u_y"] {
            assert_eq!(c.parse::<SpectrumChannel>().unwrap().name(), c);
        }
        assert!("energy".parse::<SpectrumChannel>().is_err());
    }
}
