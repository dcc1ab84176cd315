//! Periodic finite-volume solver for the 2-D compressible Navier-Stokes
//! equations in conserved form `(rho, rho u, E)` with `E = p/(gamma-1) + rho|u|^2/2`.
//!
//! Scheme: Rusanov (local Lax-Friedrichs) convective fluxes with optional
//! MUSCL-minmod reconstruction of primitive variables, central-difference
//! viscous fluxes evaluated on the same faces, and the two-stage SSP
//! Runge-Kutta method. Every update is a flux difference, so discrete totals
//! of mass and momentum telescope to round-off on the periodic grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{primitive_to_conserved, ConservedState, Grid2D, PrimitiveState, Trajectory, GAMMA};

/// Retry depth for steps that produce negative density or pressure.
pub const MAX_RETRIES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub gamma: f64,
    /// Shear viscosity `eta`.
    pub shear_viscosity: f64,
    /// Bulk viscosity `zeta`.
    pub bulk_viscosity: f64,
    pub cfl: f64,
    /// Rms Mach number of the initial velocity field.
    pub mach_target: f64,
    /// Solver steps per saved frame.
    pub save_every: usize,
    /// Saved frames including the initial condition.
    pub n_frames: usize,
    /// Physical time between frames; derived from the initial CFL limit
    /// (`save_every` steps) when absent.
    pub frame_dt: Option<f64>,
    /// Second-order reconstruction; first-order Rusanov when false.
    pub muscl: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            nx: 64,
            ny: 64,
            lx: 1.0,
            ly: 1.0,
            gamma: GAMMA,
            shear_viscosity: 1e-8,
            bulk_viscosity: 1e-8,
            cfl: 0.4,
            mach_target: 0.1,
            save_every: 10,
            n_frames: 60,
            frame_dt: Some(0.05),
            muscl: true,
        }
    }
}

impl SolverConfig {
    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::new(self.nx, self.ny, self.lx, self.ly)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid().map_err(|e| Error::config("solver.nx", e.to_string()))?;
        if !(self.cfl > 0.0 && self.cfl <= 0.5) {
            return Err(Error::config("solver.cfl", "must lie in (0, 0.5]"));
        }
        if (self.gamma - GAMMA).abs() > 1e-12 {
            return Err(Error::config(
                "solver.gamma",
                "the conserved energy E = 3/2 p + kinetic fixes gamma = 5/3",
            ));
        }
        if self.shear_viscosity < 0.0 || self.bulk_viscosity < 0.0 {
            return Err(Error::config("solver.shear_viscosity", "viscosities must be nonnegative"));
        }
        if !(self.mach_target.is_finite() && self.mach_target >= 0.0) {
            return Err(Error::config("solver.mach_target", "must be nonnegative"));
        }
        if self.save_every == 0 {
            return Err(Error::config("solver.save_every", "must be at least 1"));
        }
        if self.n_frames < 2 {
            return Err(Error::config("solver.n_frames", "must be at least 2"));
        }
        if let Some(dt) = self.frame_dt {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::config("solver.frame_dt", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Conserved fields as four flat arrays.
#[derive(Debug, Clone, PartialEq)]
struct Fields {
    q: [Vec<f64>; 4],
}

impl Fields {
    fn from_state(s: &ConservedState) -> Self {
        Fields {
            q: [s.rho.clone(), s.mom[0].clone(), s.mom[1].clone(), s.energy.clone()],
        }
    }

    fn to_state(&self, grid: Grid2D) -> Result<ConservedState> {
        ConservedState::new(
            grid,
            self.q[0].clone(),
            [self.q[1].clone(), self.q[2].clone()],
            self.q[3].clone(),
        )
    }

    /// Positive density and pressure, finite everywhere.
    fn admissible(&self, gamma: f64) -> bool {
        (0..self.q[0].len()).all(|k| {
            let r = self.q[0][k];
            let ke = 0.5 * (self.q[1][k].powi(2) + self.q[2][k].powi(2)) / r;
            let p = (gamma - 1.0) * (self.q[3][k] - ke);
            r.is_finite() && r > 0.0 && p.is_finite() && p > 0.0
        })
    }
}

/// Primitive variables `(rho, u, v, p)` at one point.
#[derive(Clone, Copy)]
struct Prim {
    r: f64,
    u: f64,
    v: f64,
    p: f64,
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

pub struct Solver {
    cfg: SolverConfig,
    grid: Grid2D,
}

impl Solver {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Solver { grid: cfg.grid()?, cfg })
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    fn prims(&self, f: &Fields) -> Vec<Prim> {
        let g = self.cfg.gamma;
        (0..f.q[0].len())
            .map(|k| {
                let r = f.q[0][k];
                let (u, v) = (f.q[1][k] / r, f.q[2][k] / r);
                Prim {
                    r,
                    u,
                    v,
                    p: (g - 1.0) * (f.q[3][k] - 0.5 * r * (u * u + v * v)),
                }
            })
            .collect()
    }

    /// Largest stable step for the current state.
    pub fn cfl_dt(&self, s: &ConservedState) -> f64 {
        self.cfl_dt_fields(&Fields::from_state(s))
    }

    fn cfl_dt_fields(&self, f: &Fields) -> f64 {
        let g = self.cfg.gamma;
        let (dx, dy) = (self.grid.dx(), self.grid.dy());
        let mut rate: f64 = 0.0;
        for w in self.prims(f) {
            let c = (g * w.p / w.r).sqrt();
            rate = rate.max((w.u.abs() + c) / dx + (w.v.abs() + c) / dy);
        }
        let nu = (self.cfg.shear_viscosity.max(self.cfg.bulk_viscosity) * 4.0 / 3.0)
            / f.q[0].iter().cloned().fold(f64::INFINITY, f64::min);
        let visc_rate = 2.0 * nu * (1.0 / (dx * dx) + 1.0 / (dy * dy));
        self.cfg.cfl / (rate + visc_rate).max(f64::MIN_POSITIVE)
    }

    /// Time derivative `L(U)` as the negative flux divergence.
    fn rhs(&self, f: &Fields) -> [Vec<f64>; 4] {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let (dx, dy) = (self.grid.dx(), self.grid.dy());
        let w = self.prims(f);
        let n = nx * ny;
        let mut out = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let idx = |i: usize, j: usize| i * ny + j;
        // x-faces: between (i, j) and (i+1, j)
        for i in 0..nx {
            let (im, ip, ipp) = ((i + nx - 1) % nx, (i + 1) % nx, (i + 2) % nx);
            for j in 0..ny {
                let flux = self.face_flux(
                    [&w[idx(im, j)], &w[idx(i, j)], &w[idx(ip, j)], &w[idx(ipp, j)]],
                    0,
                    dx,
                    dy,
                    [
                        (&w[idx(i, (j + 1) % ny)], &w[idx(i, (j + ny - 1) % ny)]),
                        (&w[idx(ip, (j + 1) % ny)], &w[idx(ip, (j + ny - 1) % ny)]),
                    ],
                );
                for c in 0..4 {
                    out[c][idx(i, j)] -= flux[c] / dx;
                    out[c][idx(ip, j)] += flux[c] / dx;
                }
            }
        }
        // y-faces: between (i, j) and (i, j+1)
        for i in 0..nx {
            let (iu, id) = ((i + 1) % nx, (i + nx - 1) % nx);
            for j in 0..ny {
                let (jm, jp, jpp) = ((j + ny - 1) % ny, (j + 1) % ny, (j + 2) % ny);
                let flux = self.face_flux(
                    [&w[idx(i, jm)], &w[idx(i, j)], &w[idx(i, jp)], &w[idx(i, jpp)]],
                    1,
                    dy,
                    dx,
                    [
                        (&w[idx(iu, j)], &w[idx(id, j)]),
                        (&w[idx(iu, jp)], &w[idx(id, jp)]),
                    ],
                );
                for c in 0..4 {
                    out[c][idx(i, j)] -= flux[c] / dy;
                    out[c][idx(i, jp)] += flux[c] / dy;
                }
            }
        }
        out
    }

    /// Convective plus viscous flux through one face. `line` holds the four
    /// cells across the face (`L-1, L, R, R+1`), `axis` the face normal, `h`
    /// the normal spacing, `ht` the tangential spacing and `tangential` the
    /// (+, -) tangential neighbours of the left and right cells.
    fn face_flux(&self, line: [&Prim; 4], axis: usize, h: f64, ht: f64, tangential: [(&Prim, &Prim); 2]) -> [f64; 4] {
        let g = self.cfg.gamma;
        let (l, r) = if self.cfg.muscl {
            let rec = |a: f64, b: f64, c: f64, d: f64| -> (f64, f64) {
                let sl = minmod(b - a, c - b);
                let sr = minmod(c - b, d - c);
                (b + 0.5 * sl, c - 0.5 * sr)
            };
            let [a, b, c, d] = line;
            let (rl, rr) = rec(a.r, b.r, c.r, d.r);
            let (ul, ur) = rec(a.u, b.u, c.u, d.u);
            let (vl, vr) = rec(a.v, b.v, c.v, d.v);
            let (pl, pr) = rec(a.p, b.p, c.p, d.p);
            (
                Prim {
                    r: rl,
                    u: ul,
                    v: vl,
                    p: pl,
                },
                Prim {
                    r: rr,
                    u: ur,
                    v: vr,
                    p: pr,
                },
            )
        } else {
            (*line[1], *line[2])
        };
        let conv = |s: &Prim| -> ([f64; 4], [f64; 4], f64) {
            let vn = if axis == 0 { s.u } else { s.v };
            let e = s.p / (g - 1.0) + 0.5 * s.r * (s.u * s.u + s.v * s.v);
            let q = [s.r, s.r * s.u, s.r * s.v, e];
            let mut f = [s.r * vn, s.r * s.u * vn, s.r * s.v * vn, (e + s.p) * vn];
            f[1 + axis] += s.p;
            let speed = vn.abs() + (g * s.p / s.r).sqrt();
            (q, f, speed)
        };
        let (ql, fl, sl) = conv(&l);
        let (qr, fr, sr) = conv(&r);
        let a = sl.max(sr);
        let mut flux = [0.0; 4];
        for c in 0..4 {
            flux[c] = 0.5 * (fl[c] + fr[c]) - 0.5 * a * (qr[c] - ql[c]);
        }
        let (eta, zeta) = (self.cfg.shear_viscosity, self.cfg.bulk_viscosity);
        if eta > 0.0 || zeta > 0.0 {
            let (cl, cr) = (line[1], line[2]);
            // normal (n) and tangential (t) velocity components
            let comp = |s: &Prim| if axis == 0 { (s.u, s.v) } else { (s.v, s.u) };
            let ((nl, tl), (nr, tr)) = (comp(cl), comp(cr));
            let dn_n = (nr - nl) / h;
            let dn_t = (tr - tl) / h;
            let ((lp, lm), (rp, rm)) = (tangential[0], tangential[1]);
            let dt_n = 0.5 * ((comp(lp).0 - comp(lm).0) + (comp(rp).0 - comp(rm).0)) / (2.0 * ht);
            let dt_t = 0.5 * ((comp(lp).1 - comp(lm).1) + (comp(rp).1 - comp(rm).1)) / (2.0 * ht);
            let div = dn_n + dt_t;
            let tau_nn = eta * (2.0 * dn_n - 2.0 / 3.0 * div) + zeta * div;
            let tau_nt = eta * (dn_t + dt_n);
            let (un, ut) = (0.5 * (nl + nr), 0.5 * (tl + tr));
            flux[1 + axis] -= tau_nn;
            flux[2 - axis] -= tau_nt;
            flux[3] -= un * tau_nn + ut * tau_nt;
        }
        flux
    }

    fn ssp_rk2(&self, f: &Fields, dt: f64) -> Fields {
        let k1 = self.rhs(f);
        let mut stage = f.clone();
        for c in 0..4 {
            for (s, d) in stage.q[c].iter_mut().zip(&k1[c]) {
                *s += dt * d;
            }
        }
        let k2 = self.rhs(&stage);
        let mut out = f.clone();
        for c in 0..4 {
            for k in 0..out.q[c].len() {
                out.q[c][k] = 0.5 * f.q[c][k] + 0.5 * (stage.q[c][k] + dt * k2[c][k]);
            }
        }
        out
    }

    /// Advances by `dt`, splitting into halves when the result is not
    /// admissible, at most [`MAX_RETRIES`] levels deep.
    fn advance(&self, f: &Fields, dt: f64, depth: usize) -> Result<Fields> {
        let next = self.ssp_rk2(f, dt);
        if next.admissible(self.cfg.gamma) {
            return Ok(next);
        }
        if depth >= MAX_RETRIES {
            let bad = (0..next.q[0].len())
                .find(|&k| !(next.q[0][k] > 0.0 && next.q[0][k].is_finite()))
                .map(|k| format!("density {} at cell {k}", next.q[0][k]))
                .unwrap_or_else(|| "negative pressure".into());
            return Err(Error::Diverged(format!(
                "solver step of dt={dt:.3e} failed after {MAX_RETRIES} halvings: {bad}"
            )));
        }
        log::debug!("retrying solver step with dt={:.3e}", dt / 2.0);
        let half = self.advance(f, dt / 2.0, depth + 1)?;
        self.advance(&half, dt / 2.0, depth + 1)
    }

    /// One step of size `dt`, sub-stepped if `dt` exceeds the CFL limit.
    pub fn step(&self, s: &ConservedState, dt: f64) -> Result<ConservedState> {
        let f = self.step_fields(&Fields::from_state(s), dt)?;
        f.to_state(self.grid)
    }

    fn step_fields(&self, f: &Fields, dt: f64) -> Result<Fields> {
        let limit = self.cfl_dt_fields(f);
        let pieces = (dt / limit).ceil().max(1.0) as usize;
        let sub = dt / pieces as f64;
        let mut cur = f.clone();
        for _ in 0..pieces {
            cur = self.advance(&cur, sub, 0)?;
        }
        Ok(cur)
    }

    /// Frame spacing used for `ic`.
    pub fn frame_dt(&self, ic: &ConservedState) -> f64 {
        self.cfg
            .frame_dt
            .unwrap_or_else(|| self.cfg.save_every as f64 * self.cfl_dt(ic))
    }

    /// Integrates from `ic`, saving `n_frames` frames `frame_dt` apart.
    pub fn solve(&self, ic: &PrimitiveState) -> Result<Trajectory<ConservedState>> {
        if ic.grid != self.grid {
            return Err(Error::Shape("initial condition is not on the solver grid".into()));
        }
        let first = primitive_to_conserved(ic)?;
        let frame_dt = self.frame_dt(&first);
        let dt = frame_dt / self.cfg.save_every as f64;
        let mut f = Fields::from_state(&first);
        let mut states = vec![first];
        for frame in 1..self.cfg.n_frames {
            for _ in 0..self.cfg.save_every {
                f = self.step_fields(&f, dt).map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("frame {frame}: {m}")),
                    other => other,
                })?;
            }
            states.push(f.to_state(self.grid)?);
        }
        Trajectory::new(frame_dt, states)
    }
}

/// Convenience wrapper: builds a solver and integrates `ic`.
pub fn solve(cfg: &SolverConfig, ic: &PrimitiveState) -> Result<Trajectory<ConservedState>> {
    Solver::new(cfg.clone())?.solve(ic)
}
