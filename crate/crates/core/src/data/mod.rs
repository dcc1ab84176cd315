//! Reference data: solver, initial conditions, storage and splits.

mod ic;
mod io;
mod pdebench;
mod solver;
mod split;

use rayon::prelude::*;

use crate::error::Result;
use crate::field::{ConservedState, Trajectory};

pub use ic::{IcConfig, IcSampler};
pub use io::{
    dataset_samples, read_dataset, read_dataset_meta, read_trajectory, read_trajectory_meta, write_dataset,
    write_trajectory, DatasetMeta, TrajectoryMeta, FORMAT_NAME, FORMAT_VERSION,
};
pub use pdebench::{
    arrays_to_trajectories, downsample, load_pdebench, read_pdebench, trajectories_to_arrays, write_pdebench,
    PdeBenchArrays, DATASETS as PDEBENCH_DATASETS, TIME_DATASET,
};
pub use solver::{solve, Solver, SolverConfig, MAX_RETRIES};
pub use split::{split_indices, Split};

/// Solves `count` trajectories; trajectory `i` starts from the initial
/// condition drawn with seed `seed + i`, so results do not depend on the
/// thread count.
pub fn generate_dataset(
    solver: &SolverConfig,
    ic: &IcConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory<ConservedState>>> {
    let s = Solver::new(solver.clone())?;
    let grid = s.grid();
    (0..count)
        .into_par_iter()
        .map(|i| {
            let state = IcSampler::new(ic.clone(), grid, solver.mach_target, seed.wrapping_add(i as u64))?.sample()?;
            s.solve(&state)
        })
        .collect()
}
