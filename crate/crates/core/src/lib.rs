//! Conservation-corrected autoregressive neural operators for 2-D
//! compressible flow.
//!
//! The crate is organised bottom-up:
//!
//! * [`field`]: grids, primitive and conserved states, trajectories, norms
//! * [`correction`]: magnitude and shift corrections plus drift diagnostics
//! * [`autograd`], [`spectral`], [`tensor`]: the numerical substrate of the
//!   learned operators
//! * [`models`]: FNO and DPOT-style step operators and checkpoints
//! * [`training`]: rollout, rollout loss, optimizer, schedule, training loop
//! * [`data`]: reference solver, random initial conditions, dataset I/O
//! * [`metrics`], [`spectra`]: rollout diagnostics

pub mod autograd;
pub mod correction;
pub mod data;
pub mod error;
pub mod field;
pub mod metrics;
pub mod models;
pub mod real;
pub mod spectra;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use real::{Precision, Real};
