//! Grid-aware field containers and the primitive/conserved variable maps.
//!
//! Scalar fields are stored row-major with shape `(nx, ny)`: cell `(i, j)`
//! lives at `i * ny + j`, `i` indexing x and `j` indexing y. The energy
//! variable is `E = 3/2 p + rho |u|^2 / 2`, i.e. a monatomic ideal gas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to density and pressure wherever positivity is required.
pub const POSITIVITY_FLOOR: f64 = 1e-8;

/// Heat-capacity ratio consistent with `E = 3/2 p + kinetic`.
pub const GAMMA: f64 = 5.0 / 3.0;

/// `1 / (GAMMA - 1)`, written exactly to avoid rounding in `E = 3/2 p + ...`.
const INTERNAL_ENERGY_FACTOR: f64 = 1.5;

/// Regular periodic 2-D grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "unit_length")]
    pub lx: f64,
    #[serde(default = "unit_length")]
    pub ly: f64,
}

fn unit_length() -> f64 {
    1.0
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        let grid = Grid2D { nx, ny, lx, ly };
        grid.validate()?;
        Ok(grid)
    }

    /// Unit-square grid.
    pub fn unit(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::config(
                "grid",
                format!("need at least 4 cells per axis, got {}x{}", self.nx, self.ny),
            ));
        }
        if !(self.lx.is_finite() && self.lx > 0.0 && self.ly.is_finite() && self.ly > 0.0) {
            return Err(Error::config("grid", "domain lengths must be positive"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// Domain area `A = lx * ly`.
    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    fn check_len(&self, name: &str, values: &[f64]) -> Result<()> {
        if values.len() != self.cells() {
            return Err(Error::Shape(format!(
                "`{name}` has {} cells, grid {}x{} needs {}",
                values.len(),
                self.nx,
                self.ny,
                self.cells()
            )));
        }
        Ok(())
    }
}

/// Discrete domain integral: cell sum times `dx * dy`.
pub fn total_quantity(values: &[f64], grid: &Grid2D) -> f64 {
    values.iter().sum::<f64>() * grid.cell_area()
}

/// Unweighted absolute sum over all entries.
pub fn l1_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v.abs()).sum()
}

/// Unweighted root-sum-of-squares over all entries.
pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::invalid(name, format!("non-finite value at cell {pos}"))),
        None => Ok(()),
    }
}

/// A set of named scalar channels on a shared grid.
pub trait State: Clone + Send + Sync {
    /// Channel names in storage order.
    const CHANNELS: &'static [&'static str];

    fn grid(&self) -> &Grid2D;

    fn channel(&self, index: usize) -> &[f64];

    fn from_channels(grid: Grid2D, channels: Vec<Vec<f64>>) -> Result<Self>;

    fn channel_by_name(&self, name: &str) -> Option<&[f64]> {
        Self::CHANNELS
            .iter()
            .position(|c| *c == name)
            .map(|i| self.channel(i))
    }
}

/// Density, pressure and velocity at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveState {
    pub grid: Grid2D,
    pub rho: Vec<f64>,
    pub p: Vec<f64>,
    pub u: [Vec<f64>; 2],
}

impl PrimitiveState {
    /// Builds a validated state: shapes match, values finite, `rho > 0`, `p > 0`.
    pub fn new(grid: Grid2D, rho: Vec<f64>, p: Vec<f64>, u: [Vec<f64>; 2]) -> Result<Self> {
        let state = PrimitiveState { grid, rho, p, u };
        state.validate()?;
        Ok(state)
    }

    pub fn uniform(grid: Grid2D, rho: f64, p: f64, u: [f64; 2]) -> Result<Self> {
        let n = grid.cells();
        Self::new(grid, vec![rho; n], vec![p; n], [vec![u[0]; n], vec![u[1]; n]])
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in [
            ("rho", &self.rho),
            ("p", &self.p),
            ("u_x", &self.u[0]),
            ("u_y", &self.u[1]),
        ] {
            self.grid.check_len(name, values)?;
            check_finite(name, values)?;
        }
        if let Some(pos) = self.rho.iter().position(|&r| r <= 0.0) {
            return Err(Error::invalid("rho", format!("non-positive density at cell {pos}")));
        }
        if let Some(pos) = self.p.iter().position(|&p| p <= 0.0) {
            return Err(Error::invalid("p", format!("non-positive pressure at cell {pos}")));
        }
        Ok(())
    }

    /// Local sound speed `sqrt(gamma p / rho)` per cell.
    pub fn sound_speed(&self) -> Vec<f64> {
        self.rho
            .iter()
            .zip(&self.p)
            .map(|(r, p)| (GAMMA * p / r).sqrt())
            .collect()
    }

    /// Root-mean-square Mach number over the grid.
    pub fn rms_mach(&self) -> f64 {
        let c = self.sound_speed();
        let sum: f64 = (0..self.grid.cells())
            .map(|k| (self.u[0][k].powi(2) + self.u[1][k].powi(2)) / (c[k] * c[k]))
            .sum();
        (sum / self.grid.cells() as f64).sqrt()
    }
}

impl State for PrimitiveState {
    const CHANNELS: &'static [&'static str] = &["rho", "p", "u_x", "u_y"];

    fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn channel(&self, index: usize) -> &[f64] {
        match index {
            0 => &self.rho,
            1 => &self.p,
            2 => &self.u[0],
            3 => &self.u[1],
            _ => panic!("primitive state has 4 channels, asked for {index}"),
        }
    }

    fn from_channels(grid: Grid2D, channels: Vec<Vec<f64>>) -> Result<Self> {
        let [rho, p, ux, uy] = four(channels)?;
        Self::new(grid, rho, p, [ux, uy])
    }
}

/// Density, momentum and total energy at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConservedState {
    pub grid: Grid2D,
    pub rho: Vec<f64>,
    pub mom: [Vec<f64>; 2],
    pub energy: Vec<f64>,
}

impl ConservedState {
    /// Builds a validated state: shapes match, values finite, `rho >= 0`, `E >= 0`.
    pub fn new(grid: Grid2D, rho: Vec<f64>, mom: [Vec<f64>; 2], energy: Vec<f64>) -> Result<Self> {
        let state = ConservedState {
            grid,
            rho,
            mom,
            energy,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, values) in [
            ("rho", &self.rho),
            ("mom_x", &self.mom[0]),
            ("mom_y", &self.mom[1]),
            ("E", &self.energy),
        ] {
            self.grid.check_len(name, values)?;
            check_finite(name, values)?;
        }
        if let Some(pos) = self.rho.iter().position(|&r| r < 0.0) {
            return Err(Error::invalid("rho", format!("negative density at cell {pos}")));
        }
        if let Some(pos) = self.energy.iter().position(|&e| e < 0.0) {
            return Err(Error::invalid("E", format!("negative energy at cell {pos}")));
        }
        Ok(())
    }

    /// Domain totals of (mass, x-momentum, y-momentum, energy).
    pub fn totals(&self) -> [f64; 4] {
        [
            total_quantity(&self.rho, &self.grid),
            total_quantity(&self.mom[0], &self.grid),
            total_quantity(&self.mom[1], &self.grid),
            total_quantity(&self.energy, &self.grid),
        ]
    }
}

impl State for ConservedState {
    const CHANNELS: &'static [&'static str] = &["rho", "mom_x", "mom_y", "E"];

    fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn channel(&self, index: usize) -> &[f64] {
        match index {
            0 => &self.rho,
            1 => &self.mom[0],
            2 => &self.mom[1],
            3 => &self.energy,
            _ => panic!("conserved state has 4 channels, asked for {index}"),
        }
    }

    fn from_channels(grid: Grid2D, channels: Vec<Vec<f64>>) -> Result<Self> {
        let [rho, mx, my, e] = four(channels)?;
        Self::new(grid, rho, [mx, my], e)
    }
}

fn four(channels: Vec<Vec<f64>>) -> Result<[Vec<f64>; 4]> {
    let n = channels.len();
    channels
        .try_into()
        .map_err(|_| Error::Shape(format!("expected 4 channels, got {n}")))
}

/// Cells clamped while converting back to primitive variables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub clamped_density: usize,
    pub clamped_pressure: usize,
}

impl ConversionReport {
    pub fn is_degenerate(&self) -> bool {
        self.clamped_density > 0 || self.clamped_pressure > 0
    }
}

/// `(rho, p, u) -> (rho, rho u, 3/2 p + rho |u|^2 / 2)`.
pub fn primitive_to_conserved(s: &PrimitiveState) -> Result<ConservedState> {
    s.validate()?;
    let n = s.grid.cells();
    let mut mom = [vec![0.0; n], vec![0.0; n]];
    let mut energy = vec![0.0; n];
    for k in 0..n {
        let (r, ux, uy) = (s.rho[k], s.u[0][k], s.u[1][k]);
        mom[0][k] = r * ux;
        mom[1][k] = r * uy;
        energy[k] = INTERNAL_ENERGY_FACTOR * s.p[k] + 0.5 * r * (ux * ux + uy * uy);
    }
    ConservedState::new(s.grid, s.rho.clone(), mom, energy)
}

/// Inverse of [`primitive_to_conserved`].
///
/// Density below [`POSITIVITY_FLOOR`] is replaced by the floor and negative or
/// zero pressure is clamped to the floor; both are counted in the report so a
/// rollout can continue past a degenerate prediction.
pub fn conserved_to_primitive(c: &ConservedState) -> Result<(PrimitiveState, ConversionReport)> {
    for (name, values) in [
        ("rho", &c.rho),
        ("mom_x", &c.mom[0]),
        ("mom_y", &c.mom[1]),
        ("E", &c.energy),
    ] {
        c.grid.check_len(name, values)?;
        check_finite(name, values)?;
    }
    let n = c.grid.cells();
    let mut report = ConversionReport::default();
    let mut rho = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut u = [vec![0.0; n], vec![0.0; n]];
    for k in 0..n {
        let mut r = c.rho[k];
        if r < POSITIVITY_FLOOR {
            r = POSITIVITY_FLOOR;
            report.clamped_density += 1;
        }
        let (mx, my) = (c.mom[0][k], c.mom[1][k]);
        let kinetic = 0.5 * (mx * mx + my * my) / r;
        let mut pk = (c.energy[k] - kinetic) / INTERNAL_ENERGY_FACTOR;
        if pk < POSITIVITY_FLOOR {
            pk = POSITIVITY_FLOOR;
            report.clamped_pressure += 1;
        }
        rho[k] = r;
        p[k] = pk;
        u[0][k] = mx / r;
        u[1][k] = my / r;
    }
    if report.is_degenerate() {
        log::debug!(
            "clamped {} density and {} pressure cells during conversion",
            report.clamped_density,
            report.clamped_pressure
        );
    }
    Ok((PrimitiveState::new(c.grid, rho, p, u)?, report))
}

/// Time-ordered states on one grid with a uniform frame spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S: State> {
    pub grid: Grid2D,
    pub dt: f64,
    pub states: Vec<S>,
}

impl<S: State> Trajectory<S> {
    /// Requires at least one state, a positive `dt`, and a shared grid.
    ///
    /// Reference data always has two or more frames; a single-frame
    /// trajectory only arises from a rollout that diverged on its first step.
    pub fn new(dt: f64, states: Vec<S>) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Empty("trajectory has no states".into()))?;
        let grid = *first.grid();
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        if let Some(t) = states.iter().position(|s| s.grid() != &grid) {
            return Err(Error::Shape(format!("state {t} is on a different grid")));
        }
        Ok(Trajectory { grid, dt, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Frames `range` as a new trajectory.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.is_empty() {
            return Err(Error::Shape(format!(
                "frame range {range:?} outside trajectory of length {}",
                self.len()
            )));
        }
        Trajectory::new(self.dt, self.states[range].to_vec())
    }
}

impl Trajectory<ConservedState> {
    pub fn to_primitive(&self) -> Result<(Trajectory<PrimitiveState>, ConversionReport)> {
        let mut total = ConversionReport::default();
        let mut states = Vec::with_capacity(self.len());
        for s in &self.states {
            let (p, report) = conserved_to_primitive(s)?;
            total.clamped_density += report.clamped_density;
            total.clamped_pressure += report.clamped_pressure;
            states.push(p);
        }
        Ok((Trajectory::new(self.dt, states)?, total))
    }
}

impl Trajectory<PrimitiveState> {
    pub fn to_conserved(&self) -> Result<Trajectory<ConservedState>> {
        let states = self
            .states
            .iter()
            .map(primitive_to_conserved)
            .collect::<Result<Vec<_>>>()?;
        Trajectory::new(self.dt, states)
    }
}
