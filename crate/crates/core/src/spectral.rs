//! Truncated 2-D discrete Fourier transforms on a retained mode set.
//!
//! A [`ModeSet`] selects signed wavevectors `(kx, ky)` either in the box
//! `|kx|, |ky| <= m` or the disk `kx^2 + ky^2 <= m^2`. Both sets are closed
//! under negation, so a real field's retained spectrum is conjugate-symmetric.
//!
//! Conventions used by the operators and their adjoints:
//! * [`SpectralPlan::forward`]: `Z_k = (1/N) sum_n x_n exp(-i k.n)` on retained `k`
//! * [`SpectralPlan::inverse`]: `y_n = Re sum_k Y_k exp(+i k.n)` over retained `k`
//!
//! Complex tensors are packed as `(2, C, K)`: real parts then imaginary parts.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Shape of the retained low-frequency region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModeMask {
    Block,
    #[default]
    Disk,
}

/// Signed integer frequency for FFT index `i` on an `n`-point axis.
/// The Nyquist index maps to `+n/2`.
#[inline]
pub fn signed_frequency(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Retained Fourier modes grouped by y-frequency column.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    nx: usize,
    ny: usize,
    modes: usize,
    mask: ModeMask,
    columns: Vec<(usize, Vec<usize>)>,
    count: usize,
}

impl ModeSet {
    pub fn new(nx: usize, ny: usize, modes: usize, mask: ModeMask) -> Result<Self> {
        if modes == 0 || modes > nx / 2 || modes > ny / 2 {
            return Err(Error::config(
                "modes",
                format!("{modes} modes exceed the Nyquist limit of a {nx}x{ny} grid"),
            ));
        }
        let m = modes as i64;
        let mut columns = Vec::new();
        let mut count = 0;
        for iy in 0..ny {
            let ky = signed_frequency(iy, ny);
            let rows: Vec<usize> = (0..nx)
                .filter(|&ix| {
                    let kx = signed_frequency(ix, nx);
                    match mask {
                        ModeMask::Block => kx.abs() <= m && ky.abs() <= m,
                        ModeMask::Disk => kx * kx + ky * ky <= m * m,
                    }
                })
                .collect();
            if !rows.is_empty() {
                count += rows.len();
                columns.push((iy, rows));
            }
        }
        Ok(ModeSet {
            nx,
            ny,
            modes,
            mask,
            columns,
            count,
        })
    }

    /// Number of retained modes `K`.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn mask(&self) -> ModeMask {
        self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Retained `(ix, iy)` index pairs in packing order.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.columns
            .iter()
            .flat_map(|(iy, rows)| rows.iter().map(move |&ix| (ix, *iy)))
    }

    /// Largest rounded radial shell any retained mode falls in.
    pub fn max_shell(&self) -> usize {
        self.indices()
            .map(|(ix, iy)| {
                let kx = signed_frequency(ix, self.nx) as f64;
                let ky = signed_frequency(iy, self.ny) as f64;
                (kx * kx + ky * ky).sqrt().round() as usize
            })
            .max()
            .unwrap_or(0)
    }
}

/// FFT plans plus the retained mode set for one grid.
pub struct SpectralPlan<T: Real> {
    modes: ModeSet,
    x_fwd: Arc<dyn Fft<T>>,
    x_inv: Arc<dyn Fft<T>>,
    y_fwd: Arc<dyn Fft<T>>,
    y_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for SpectralPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPlan").field("modes", &self.modes).finish()
    }
}

impl<T: Real> SpectralPlan<T> {
    pub fn new(modes: ModeSet) -> Self {
        let mut planner = FftPlanner::<T>::new();
        let (nx, ny) = modes.dims();
        SpectralPlan {
            x_fwd: planner.plan_fft_forward(nx),
            x_inv: planner.plan_fft_inverse(nx),
            y_fwd: planner.plan_fft_forward(ny),
            y_inv: planner.plan_fft_inverse(ny),
            modes,
        }
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    /// `(C, nx, ny)` real data to packed `(2, C, K)` normalized coefficients.
    pub fn forward(&self, x: &[T], channels: usize) -> Vec<T> {
        let (nx, ny) = self.modes.dims();
        let n = nx * ny;
        let k = self.modes.len();
        assert_eq!(x.len(), channels * n);
        let scale = T::one() / T::from_usize(n).unwrap();
        let mut out = vec![T::zero(); 2 * channels * k];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut col = vec![Complex::new(T::zero(), T::zero()); nx];
        for c in 0..channels {
            for (b, &v) in buf.iter_mut().zip(&x[c * n..(c + 1) * n]) {
                *b = Complex::new(v, T::zero());
            }
            self.y_fwd.process(&mut buf);
            let mut slot = 0;
            for (iy, rows) in &self.modes.columns {
                for (i, cv) in col.iter_mut().enumerate() {
                    *cv = buf[i * ny + iy];
                }
                self.x_fwd.process(&mut col);
                for &ix in rows {
                    out[c * k + slot] = col[ix].re * scale;
                    out[(channels + c) * k + slot] = col[ix].im * scale;
                    slot += 1;
                }
            }
        }
        out
    }

    /// Packed `(2, C, K)` coefficients to `(C, nx, ny)`: real part of the
    /// unnormalized inverse transform with zeros outside the retained set.
    pub fn inverse(&self, z: &[T], channels: usize) -> Vec<T> {
        let (nx, ny) = self.modes.dims();
        let n = nx * ny;
        let k = self.modes.len();
        assert_eq!(z.len(), 2 * channels * k);
        let zero = Complex::new(T::zero(), T::zero());
        let mut out = vec![T::zero(); channels * n];
        let mut buf = vec![zero; n];
        let mut col = vec![zero; nx];
        for c in 0..channels {
            buf.iter_mut().for_each(|b| *b = zero);
            let mut slot = 0;
            for (iy, rows) in &self.modes.columns {
                col.iter_mut().for_each(|v| *v = zero);
                for &ix in rows {
                    col[ix] = Complex::new(z[c * k + slot], z[(channels + c) * k + slot]);
                    slot += 1;
                }
                self.x_inv.process(&mut col);
                for (i, cv) in col.iter().enumerate() {
                    buf[i * ny + iy] = *cv;
                }
            }
            self.y_inv.process(&mut buf);
            for (o, b) in out[c * n..(c + 1) * n].iter_mut().zip(&buf) {
                *o = b.re;
            }
        }
        out
    }
}

/// Full unnormalized forward 2-D FFT of a real `(nx, ny)` field.
pub fn fft2(values: &[f64], nx: usize, ny: usize) -> Vec<Complex<f64>> {
    assert_eq!(values.len(), nx * ny);
    let mut planner = FftPlanner::<f64>::new();
    let fx = planner.plan_fft_forward(nx);
    let fy = planner.plan_fft_forward(ny);
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fy.process(&mut buf);
    let mut col = vec![Complex::new(0.0, 0.0); nx];
    for iy in 0..ny {
        for i in 0..nx {
            col[i] = buf[i * ny + iy];
        }
        fx.process(&mut col);
        for i in 0..nx {
            buf[i * ny + iy] = col[i];
        }
    }
    buf
}
