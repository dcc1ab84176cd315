use std::f64::consts::PI;

use conserve_core::data::*;
use conserve_core::field::{conserved_to_primitive, primitive_to_conserved, Grid2D, PrimitiveState, Trajectory};
use conserve_core::spectra::radial_spectrum;
use conserve_core::Precision;
use proptest::prelude::*;

fn small_cfg(nx: usize, ny: usize) -> SolverConfig {
    SolverConfig {
        nx,
        ny,
        n_frames: 3,
        save_every: 5,
        frame_dt: None,
        ..SolverConfig::default()
    }
}

#[test]
fn uniform_state_is_stationary() {
    let cfg = small_cfg(16, 16);
    let grid = cfg.grid().unwrap();
    let ic = PrimitiveState::uniform(grid, 1.0, 1.0, [0.0, 0.0]).unwrap();
    let traj = solve(&cfg, &ic).unwrap();
    let first = &traj.states[0];
    for s in &traj.states {
        assert_eq!(s, first);
    }
}

#[test]
fn moving_uniform_state_is_stationary() {
    let cfg = small_cfg(8, 8);
    let ic = PrimitiveState::uniform(cfg.grid().unwrap(), 1.3, 0.7, [0.2, -0.1]).unwrap();
    let traj = solve(&cfg, &ic).unwrap();
    for s in &traj.states[1..] {
        for (a, b) in s.energy.iter().zip(&traj.states[0].energy) {
            assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
        }
    }
}

#[test]
fn mass_and_momentum_drift_over_hundred_steps() {
    let cfg = SolverConfig {
        nx: 64,
        ny: 64,
        mach_target: 0.5,
        save_every: 10,
        n_frames: 11,
        frame_dt: None,
        ..SolverConfig::default()
    };
    let grid = cfg.grid().unwrap();
    let ic = IcSampler::new(IcConfig::default(), grid, cfg.mach_target, 3)
        .unwrap()
        .sample()
        .unwrap();
    let traj = solve(&cfg, &ic).unwrap();
    let start = traj.states[0].totals();
    for s in &traj.states {
        let now = s.totals();
        assert!(((now[0] - start[0]) / start[0]).abs() <= 1e-10);
        assert!((now[1] - start[1]).abs() <= 1e-10);
        assert!((now[2] - start[2]).abs() <= 1e-10);
        s.validate().unwrap();
    }
}

/// Phase of the first x-harmonic of the y-averaged density.
fn first_harmonic_phase(rho: &[f64], nx: usize, ny: usize) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for i in 0..nx {
        let x = (i as f64 + 0.5) / nx as f64;
        let mean: f64 = rho[i * ny..(i + 1) * ny].iter().sum::<f64>() / ny as f64;
        re += mean * (2.0 * PI * x).cos();
        im -= mean * (2.0 * PI * x).sin();
    }
    im.atan2(re)
}

#[test]
fn acoustic_wave_travels_at_sound_speed() {
    let (nx, ny) = (128, 4);
    let cfg = SolverConfig {
        nx,
        ny,
        n_frames: 16,
        save_every: 4,
        frame_dt: Some(0.025),
        ..SolverConfig::default()
    };
    let grid = cfg.grid().unwrap();
    let c = (cfg.gamma * 1.0f64 / 1.0).sqrt();
    let eps = 1e-3;
    let mut rho = vec![0.0; nx * ny];
    let mut p = vec![0.0; nx * ny];
    let mut u = vec![0.0; nx * ny];
    for i in 0..nx {
        let wave = (2.0 * PI * (i as f64 + 0.5) / nx as f64).cos();
        for j in 0..ny {
            rho[i * ny + j] = 1.0 + eps * wave;
            p[i * ny + j] = 1.0 + cfg.gamma * eps * wave;
            u[i * ny + j] = c * eps * wave;
        }
    }
    let ic = PrimitiveState::new(grid, rho, p, [u, vec![0.0; nx * ny]]).unwrap();
    let traj = solve(&cfg, &ic).unwrap();
    let mut phases: Vec<f64> = traj.states.iter().map(|s| first_harmonic_phase(&s.rho, nx, ny)).collect();
    for k in 1..phases.len() {
        while phases[k] - phases[k - 1] > PI {
            phases[k] -= 2.0 * PI;
        }
        while phases[k] - phases[k - 1] < -PI {
            phases[k] += 2.0 * PI;
        }
    }
    let elapsed = traj.dt * (traj.len() - 1) as f64;
    let speed = -(phases[phases.len() - 1] - phases[0]) / (2.0 * PI * elapsed);
    assert!(((speed - c) / c).abs() < 0.05, "measured {speed}, expected {c}");
}

#[test]
fn ic_hits_mach_target_and_band_limit() {
    let grid = Grid2D::unit(32, 32).unwrap();
    for seed in 0..5 {
        let ic = IcSampler::new(IcConfig::default(), grid, 0.1, seed).unwrap().sample().unwrap();
        let m = ic.rms_mach();
        assert!((0.09..=0.11).contains(&m), "rms Mach {m}");
        assert!(ic.rho.iter().all(|&r| r > 0.0) && ic.p.iter().all(|&p| p > 0.0));
        for field in [&ic.rho, &ic.p, &ic.u[0], &ic.u[1]] {
            let spec = radial_spectrum(field, 32, 32).unwrap();
            assert!(spec.fraction_above(4) <= 1e-20, "energy above |k|=4");
        }
    }
}

#[test]
fn ic_is_reproducible() {
    let grid = Grid2D::unit(16, 16).unwrap();
    let a = IcSampler::new(IcConfig::default(), grid, 0.1, 9).unwrap().sample().unwrap();
    let b = IcSampler::new(IcConfig::default(), grid, 0.1, 9).unwrap().sample().unwrap();
    let c = IcSampler::new(IcConfig::default(), grid, 0.1, 10).unwrap().sample().unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn generated_dataset_is_valid_and_deterministic() {
    let cfg = SolverConfig {
        nx: 16,
        ny: 16,
        n_frames: 4,
        save_every: 2,
        ..SolverConfig::default()
    };
    let a = generate_dataset(&cfg, &IcConfig::default(), 3, 1).unwrap();
    let b = generate_dataset(&cfg, &IcConfig::default(), 3, 1).unwrap();
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.states, y.states);
        assert_eq!(x.len(), 4);
        assert!((x.dt - 0.05).abs() < 1e-15);
        for s in &x.states {
            s.validate().unwrap();
        }
    }
}

#[test]
fn near_vacuum_jet_stays_admissible() {
    let cfg = SolverConfig {
        nx: 8,
        ny: 8,
        n_frames: 2,
        save_every: 1,
        ..SolverConfig::default()
    };
    let grid = cfg.grid().unwrap();
    let n = grid.cells();
    let mut rho = vec![1.0; n];
    let mut u = vec![0.0; n];
    for k in 0..n / 2 {
        rho[k] = 1e-4;
        u[k] = 50.0;
    }
    let ic = PrimitiveState::new(grid, rho, vec![1e-4; n], [u, vec![0.0; n]]).unwrap();
    let traj = solve(&cfg, &ic).unwrap();
    for s in &traj.states {
        let (prim, report) = conserved_to_primitive(s).unwrap();
        assert!(!report.is_degenerate());
        prim.validate().unwrap();
    }
}

#[test]
fn config_validation_names_fields() {
    let bad = SolverConfig {
        cfl: 0.9,
        ..SolverConfig::default()
    };
    assert!(bad.validate().unwrap_err().to_string().contains("solver.cfl"));
    let bad = SolverConfig {
        gamma: 1.4,
        ..SolverConfig::default()
    };
    assert!(bad.validate().unwrap_err().to_string().contains("solver.gamma"));
}

#[test]
fn split_sizes_and_reproducibility() {
    let s = split_indices(10, [0.8, 0.1, 0.1], 4).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    assert_eq!(s, split_indices(10, [0.8, 0.1, 0.1], 4).unwrap());
    assert!(split_indices(10, [0.8, 0.1, 0.2], 4).is_err());
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 0usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, seed in any::<u64>()) {
        let (fa, fb) = (a, (1.0 - a) * b);
        let s = split_indices(n, [fa, fb, 1.0 - fa - fb], seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

fn sample_trajectory() -> Trajectory<conserve_core::field::ConservedState> {
    let cfg = SolverConfig {
        nx: 8,
        ny: 8,
        n_frames: 3,
        save_every: 2,
        ..SolverConfig::default()
    };
    generate_dataset(&cfg, &IcConfig::default(), 1, 5).unwrap().remove(0)
}

#[test]
fn trajectory_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let traj = sample_trajectory();
    write_trajectory(dir.path(), &traj, Precision::Double, serde_json::json!({"source": "test"})).unwrap();
    let back: Trajectory<conserve_core::field::ConservedState> = read_trajectory(dir.path()).unwrap();
    assert_eq!(back.states, traj.states);
    assert_eq!(back.dt, traj.dt);
    let meta = read_trajectory_meta(dir.path()).unwrap();
    assert_eq!(meta.channels, ["rho", "mom_x", "mom_y", "E"]);
    assert_eq!(meta.frames, 3);
    let bytes = std::fs::read(dir.path().join("rho.bin")).unwrap();
    assert_eq!(bytes.len(), 3 * 64 * 8);
    assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), traj.states[0].rho[1]);
}

#[test]
fn single_precision_storage_rounds_to_f32() {
    let dir = tempfile::tempdir().unwrap();
    let traj = sample_trajectory();
    write_trajectory(dir.path(), &traj, Precision::Single, serde_json::Value::Null).unwrap();
    let back: Trajectory<conserve_core::field::ConservedState> = read_trajectory(dir.path()).unwrap();
    for (a, b) in back.states[2].rho.iter().zip(&traj.states[2].rho) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn dataset_round_trip_and_truncation_error() {
    let dir = tempfile::tempdir().unwrap();
    let traj = sample_trajectory();
    write_dataset(dir.path(), &[traj.clone(), traj.clone()], Precision::Double, serde_json::Value::Null).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[1].states, traj.states);
    let sample = dataset_samples(dir.path()).unwrap().remove(0);
    let path = sample.join("E.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("E.bin"), "{err}");
}

#[test]
fn primitive_trajectories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (prim, _) = sample_trajectory().to_primitive().unwrap();
    write_trajectory(dir.path(), &prim, Precision::Double, serde_json::Value::Null).unwrap();
    let back: Trajectory<PrimitiveState> = read_trajectory(dir.path()).unwrap();
    assert_eq!(back.states, prim.states);
    // reading with the wrong state type is a format error
    assert!(read_trajectory::<conserve_core::field::ConservedState>(dir.path()).is_err());
}

#[test]
fn downsample_by_stride() {
    let (nx, ny) = (128, 128);
    let field: Vec<f64> = (0..nx * ny).map(|k| k as f64).collect();
    let d = downsample(&field, nx, ny, 64, 64).unwrap();
    assert_eq!(d.len(), 64 * 64);
    assert_eq!(d[0], 0.0);
    assert_eq!(d[1], 2.0);
    assert_eq!(d[64], (2 * ny) as f64);
    let uniform = downsample(&vec![0.3; nx * ny], nx, ny, 64, 64).unwrap();
    assert!(uniform.iter().all(|&v| v == 0.3));
    assert!(downsample(&field, nx, ny, 48, 64).is_err());
}

#[test]
fn pdebench_arrays_convert_to_conserved() {
    let traj = sample_trajectory();
    let (prim, _) = traj.to_primitive().unwrap();
    let arrays = trajectories_to_arrays(&[prim.clone(), prim.clone()]).unwrap();
    assert_eq!((arrays.n, arrays.t, arrays.nx, arrays.ny), (2, 3, 8, 8));
    let back = arrays_to_trajectories(&arrays, None, 1.0, 1.0).unwrap();
    assert_eq!(back.len(), 2);
    assert!((back[0].dt - traj.dt).abs() < 1e-15);
    for (a, b) in back[1].states.iter().zip(&traj.states) {
        let again = primitive_to_conserved(&conserved_to_primitive(b).unwrap().0).unwrap();
        assert_eq!(a, &again);
    }
    let coarse = arrays_to_trajectories(&arrays, Some((4, 4)), 1.0, 1.0).unwrap();
    assert_eq!(coarse[0].states[0].grid.nx, 4);

    let mut broken = arrays.clone();
    broken.vy.pop();
    let err = arrays_to_trajectories(&broken, None, 1.0, 1.0).unwrap_err().to_string();
    assert!(err.contains("Vy"), "{err}");
}

#[cfg(not(feature = "hdf5"))]
#[test]
fn pdebench_io_needs_feature() {
    let err = read_pdebench(std::path::Path::new("missing.h5"), 0..1).unwrap_err().to_string();
    assert!(err.contains("hdf5"));
}

#[cfg(feature = "hdf5")]
mod hdf5_files {
    use super::*;

    #[test]
    fn exporter_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synthetic.h5");
        let (prim, _) = sample_trajectory().to_primitive().unwrap();
        let arrays = trajectories_to_arrays(&[prim.clone(), prim.clone(), prim]).unwrap();
        write_pdebench(&path, &arrays).unwrap();
        assert_eq!(read_pdebench(&path, 0..3).unwrap(), arrays);
        let tail = read_pdebench(&path, 1..3).unwrap();
        assert_eq!(tail.n, 2);
        assert_eq!(tail.density, arrays.density[arrays.density.len() / 3..]);
        let loaded = load_pdebench(&path, 0..1, Some((4, 4))).unwrap();
        assert_eq!(loaded[0].states[0].grid.nx, 4);
        assert!(read_pdebench(&path, 2..5).unwrap_err().to_string().contains("density"));
    }

    #[test]
    fn missing_dataset_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.h5");
        let (prim, _) = sample_trajectory().to_primitive().unwrap();
        let arrays = trajectories_to_arrays(&[prim]).unwrap();
        write_pdebench(&path, &arrays).unwrap();
        assert!(read_pdebench(&dir.path().join("absent.h5"), 0..1).is_err());
    }
}
