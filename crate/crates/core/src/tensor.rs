use std::fmt;

use crate::error::{Error, Result};
use crate::field::{ConservedState, Grid2D, State};
use crate::real::Real;

/// Dense row-major array. The first axis is the channel axis throughout.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing axes.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[T] {
        let n = self.row_len();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy().powi(2)).sum()
    }

    /// `(4, nx, ny)` tensor holding `rho, mom_x, mom_y, E`.
    pub fn from_state<S: State>(state: &S) -> Self {
        let g = state.grid();
        let mut data = Vec::with_capacity(S::CHANNELS.len() * g.cells());
        for c in 0..S::CHANNELS.len() {
            data.extend(state.channel(c).iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor {
            shape: vec![S::CHANNELS.len(), g.nx, g.ny],
            data,
        }
    }

    pub fn to_conserved(&self, grid: Grid2D) -> Result<ConservedState> {
        if self.shape != [4, grid.nx, grid.ny] {
            return Err(Error::Shape(format!(
                "expected (4, {}, {}), got {:?}",
                grid.nx, grid.ny, self.shape
            )));
        }
        let channels = (0..4).map(|c| self.row(c).iter().map(|v| v.to_f64_lossy()).collect()).collect();
        ConservedState::from_channels(grid, channels)
    }
}
