use conserve_core::autograd::Graph;
use conserve_core::correction::{conservation_drift, max_drift, CorrectionSpec};
use conserve_core::data::{generate_dataset, IcConfig, SolverConfig};
use conserve_core::field::{primitive_to_conserved, ConservedState, Grid2D, PrimitiveState, State, Trajectory};
use conserve_core::models::{build_operator, Arch, OperatorConfig, Operator, StepOperator};
use conserve_core::tensor::Tensor;
use conserve_core::training::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(nx: usize, ny: usize, rng: &mut ChaCha8Rng) -> ConservedState {
    let grid = Grid2D::unit(nx, ny).unwrap();
    let n = nx * ny;
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(lo..hi)).collect() };
    let rho = draw(0.8, 1.2);
    let p = draw(0.8, 1.2);
    let u = [draw(-0.2, 0.2), draw(-0.2, 0.2)];
    primitive_to_conserved(&PrimitiveState::new(grid, rho, p, u).unwrap()).unwrap()
}

/// Independent two-loop form of the rollout loss.
fn loss_oracle<S: State>(pred: &[S], truth: &[S]) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..S::CHANNELS.len() {
            let (a, b) = (pred[i].channel(c), truth[i].channel(c));
            for k in 0..a.len() {
                num += (a[k] - b[k]).powi(2);
                den += b[k].powi(2);
            }
        }
        total += num.sqrt() / den.sqrt().max(1e-12);
    }
    total
}

#[test]
fn loss_matches_two_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for tau in 1..6 {
        let truth: Vec<_> = (0..=tau).map(|_| random_state(8, 8, &mut rng)).collect();
        let pred: Vec<_> = (0..=tau).map(|_| random_state(8, 8, &mut rng)).collect();
        let got = rollout_loss(&pred, &truth).unwrap().value;
        let want = loss_oracle(&pred, &truth);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn zero_prediction_loss_is_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = Grid2D::unit(8, 8).unwrap();
    for tau in [1usize, 3, 7] {
        let truth: Vec<_> = (0..=tau).map(|_| random_state(8, 8, &mut rng)).collect();
        let mut pred = vec![truth[0].clone()];
        for _ in 0..tau {
            pred.push(ConservedState::from_channels(grid, vec![vec![0.0; 64]; 4]).unwrap());
        }
        assert_eq!(rollout_loss(&pred, &truth).unwrap().value, tau as f64);
    }
}

#[test]
fn zero_truth_is_guarded() {
    let grid = Grid2D::unit(4, 4).unwrap();
    let zero = ConservedState::from_channels(grid, vec![vec![0.0; 16]; 4]).unwrap();
    let v = rollout_loss(&[zero.clone(), zero.clone()], &[zero.clone(), zero]).unwrap();
    assert_eq!(v.value, 0.0);
    assert_eq!(v.guarded_steps, vec![0, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn loss_is_nonnegative_and_zero_on_truth(seed in any::<u64>(), tau in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<_> = (0..=tau).map(|_| random_state(4, 4, &mut rng)).collect();
        let pred: Vec<_> = (0..=tau).map(|_| random_state(4, 4, &mut rng)).collect();
        prop_assert!(rollout_loss(&pred, &truth).unwrap().value >= 0.0);
        prop_assert_eq!(rollout_loss(&truth, &truth).unwrap().value, 0.0);
    }
}

fn tiny_config(arch: Arch) -> OperatorConfig {
    OperatorConfig {
        arch,
        nx: 8,
        ny: 8,
        modes: 2,
        width: 4,
        depth: 1,
        patch_size: 2,
        heads: 2,
        ..OperatorConfig::default()
    }
}

fn frames(count: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Tensor::from_state(&random_state(8, 8, &mut rng))).collect()
}

fn graph_loss(op: &dyn StepOperator<f64>, frames: &[Tensor<f64>], tau: usize, spec: Option<&CorrectionSpec>) -> f64 {
    let mut g = Graph::new();
    let params = op.params().bind(&mut g, true);
    let built = rollout_loss_graph(op, &mut g, &params, frames, tau, spec).unwrap();
    g.value(built.loss).data()[0]
}

#[test]
fn graph_loss_agrees_with_rollout_loss() {
    let op = build_operator::<f64>(&tiny_config(Arch::Fno), 3).unwrap();
    let tau = 3;
    let f = frames(2 + tau, 4);
    let spec = CorrectionSpec::default();
    let mut g = Graph::new();
    let params = op.params().bind(&mut g, true);
    let built = rollout_loss_graph(op.as_ref(), &mut g, &params, &f, tau, Some(&spec)).unwrap();
    let grid = Grid2D::unit(8, 8).unwrap();
    let mut pred = vec![f[1].to_conserved(grid).unwrap()];
    pred.extend(built.predictions.iter().map(|v| g.value(*v).to_conserved(grid).unwrap()));
    let truth: Vec<_> = f[1..].iter().map(|t| t.to_conserved(grid).unwrap()).collect();
    let want = loss_oracle(&pred, &truth);
    let got = g.value(built.loss).data()[0];
    assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
    assert_eq!(built.terms.len(), tau + 1);
    assert_eq!(g.value(built.terms[0]).data()[0], 0.0);
}

/// Finite differences on `samples` randomly chosen parameter entries.
fn gradient_check(mut op: Operator<f64>, spec: Option<&CorrectionSpec>, samples: usize, seed: u64) {
    let tau = 2;
    let f = frames(op.config().history + tau, seed);
    let mut g = Graph::new();
    let params = op.params().bind(&mut g, true);
    let built = rollout_loss_graph(op.as_ref(), &mut g, &params, &f, tau, spec).unwrap();
    let mut grads = g.backward(built.loss);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .zip(op.params().tensors())
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let sizes: Vec<usize> = op.params().tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let (mut checked, mut nonzero) = (0, 0);
    let h = 1e-4;
    while checked < samples {
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let orig = op.params().get(t).data()[flat];
        let mut at = |x: f64| {
            op.params_mut().get_mut(t).data_mut()[flat] = x;
            graph_loss(op.as_ref(), &f, tau, spec)
        };
        // fourth-order central stencil
        let fd = (8.0 * (at(orig + h) - at(orig - h)) - (at(orig + 2.0 * h) - at(orig - 2.0 * h))) / (12.0 * h);
        op.params_mut().get_mut(t).data_mut()[flat] = orig;
        let a = analytic[t][flat];
        let scale = a.abs().max(fd.abs());
        // entries whose derivative is at finite-difference noise level carry no signal
        if scale > 1e-6 {
            nonzero += 1;
            assert!(
                (a - fd).abs() <= 1e-4 * scale,
                "param {} [{flat}]: analytic {a} vs fd {fd}",
                op.params().names()[t]
            );
        }
        checked += 1;
    }
    assert!(nonzero >= samples / 2, "only {nonzero} of {samples} entries had a gradient");
}

#[test]
fn fno_corrected_rollout_gradients_match_finite_differences() {
    let op = build_operator::<f64>(&tiny_config(Arch::Fno), 5).unwrap();
    gradient_check(op, Some(&CorrectionSpec::default()), 120, 7);
}

#[test]
fn dpot_corrected_rollout_gradients_match_finite_differences() {
    let op = build_operator::<f64>(&tiny_config(Arch::Dpot), 6).unwrap();
    gradient_check(op, Some(&CorrectionSpec::default()), 120, 8);
}

#[test]
fn uncorrected_rollout_gradients_match_finite_differences() {
    let op = build_operator::<f64>(&tiny_config(Arch::Fno), 9).unwrap();
    gradient_check(op, None, 100, 10);
}

fn random_trajectory(seed: u64, len: usize) -> Vec<ConservedState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| random_state(16, 16, &mut rng)).collect()
}

#[test]
fn corrected_rollout_conserves_mass_and_momentum() {
    let cfg = OperatorConfig {
        nx: 16,
        ny: 16,
        modes: 4,
        width: 8,
        depth: 2,
        ..OperatorConfig::default()
    };
    let seeds = random_trajectory(11, 2);
    let spec = CorrectionSpec::default();
    let op = build_operator::<f64>(&cfg, 12).unwrap();
    let corrected = rollout(op.as_ref(), Some(&spec), &seeds, 20, 0.05).unwrap();
    assert_eq!(corrected.diverged_at, None);
    assert_eq!(corrected.trajectory.len(), 21);
    let drift = conservation_drift(&corrected.trajectory, 1e-12).unwrap();
    for ch in ["rho", "mom_x", "mom_y"] {
        assert!(max_drift(&drift, ch) <= 1e-10, "{ch} drift {}", max_drift(&drift, ch));
    }
    let free = rollout(op.as_ref(), None, &seeds, 20, 0.05).unwrap();
    let free_drift = conservation_drift(&free.trajectory, 1e-12).unwrap();
    assert!(max_drift(&free_drift, "rho") > max_drift(&drift, "rho"));
}

#[test]
fn rollout_starts_from_newest_seed_and_checks_inputs() {
    let cfg = OperatorConfig {
        arch: Arch::Persistence,
        nx: 16,
        ny: 16,
        ..OperatorConfig::default()
    };
    let op = build_operator::<f64>(&cfg, 0).unwrap();
    let seeds = random_trajectory(13, 2);
    let out = rollout(op.as_ref(), None, &seeds, 3, 0.1).unwrap();
    assert_eq!(out.trajectory.states[0], seeds[1]);
    for s in &out.trajectory.states {
        assert_eq!(s, &seeds[1]);
    }
    assert!(rollout(op.as_ref(), None, &seeds[..1], 3, 0.1).is_err());
    assert!(rollout(op.as_ref(), None, &random_trajectory(1, 2)[..], 0, 0.1).is_err());
}

#[test]
fn rollout_stops_at_first_non_finite_prediction() {
    let mut op = build_operator::<f64>(&tiny_config(Arch::Fno), 1).unwrap();
    let last = op.params().len() - 1;
    op.params_mut().get_mut(last).data_mut()[0] = f64::NAN;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seeds: Vec<_> = (0..2).map(|_| random_state(8, 8, &mut rng)).collect();
    let out = rollout(op.as_ref(), None, &seeds, 5, 0.1).unwrap();
    assert_eq!(out.diverged_at, Some(1));
    assert_eq!(out.trajectory.len(), 1);
}

fn small_dataset() -> Vec<Trajectory<ConservedState>> {
    let solver = SolverConfig {
        nx: 16,
        ny: 16,
        n_frames: 10,
        save_every: 4,
        ..SolverConfig::default()
    };
    generate_dataset(&solver, &IcConfig::default(), 4, 21).unwrap()
}

fn small_fno() -> OperatorConfig {
    OperatorConfig {
        nx: 16,
        ny: 16,
        modes: 4,
        width: 8,
        depth: 1,
        ..OperatorConfig::default()
    }
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        rollout_steps: 2,
        epochs: 4,
        warmup_epochs: 1,
        batch_size: 2,
        peak_lr: 3e-3,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_checkpoints() {
    let data = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..quick_train()
    };
    let spec = CorrectionSpec::default();
    let mut a = build_operator::<f32>(&small_fno(), 1).unwrap();
    let ha = train(a.as_mut(), &data, &cfg, &spec, Some(dir.path())).unwrap();
    let mut b = build_operator::<f32>(&small_fno(), 1).unwrap();
    let hb = train(b.as_mut(), &data, &cfg, &spec, None).unwrap();
    assert_eq!(ha.losses(), hb.losses());
    assert!(ha.losses().iter().all(|l| l.is_finite()));
    for (x, y) in a.params().tensors().iter().zip(b.params().tensors()) {
        assert_eq!(x.data(), y.data());
    }
    assert!(dir.path().join("checkpoint_epoch0002.ckpt").exists());
    assert!(dir.path().join("checkpoint_epoch0004.ckpt").exists());
    assert!(!dir.path().join("checkpoint_epoch0001.ckpt").exists());
    let lrs: Vec<f64> = ha.epochs.iter().map(|e| e.lr).collect();
    assert!(lrs[1] > lrs[0] && lrs[3] < lrs[1]);
}

#[test]
fn training_lowers_the_loss_on_a_tiny_problem() {
    let data = small_dataset();
    let cfg = TrainConfig {
        epochs: 30,
        warmup_epochs: 3,
        batch_size: 4,
        peak_lr: 1e-2,
        ..quick_train()
    };
    let mut op = build_operator::<f64>(&small_fno(), 2).unwrap();
    let h = train(op.as_mut(), &data, &cfg, &CorrectionSpec::default(), None).unwrap();
    let l = h.losses();
    assert!(l[l.len() - 1] < l[0], "{l:?}");
}

#[test]
fn nan_parameters_abort_with_diagnostics() {
    let data = small_dataset();
    let mut op = build_operator::<f64>(&small_fno(), 3).unwrap();
    let last = op.params().len() - 1;
    op.params_mut().get_mut(last).data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        epochs: 2,
        ..quick_train()
    };
    let h = train(op.as_mut(), &data, &cfg, &CorrectionSpec::default(), None).unwrap();
    assert!(h.epochs.iter().all(|e| e.aborted));
    assert_eq!(h.diagnostics.len(), 2);
    let d = &h.diagnostics[0];
    assert_eq!(d.batch, 0);
    assert!(d.param_norm.is_nan());
    assert!(d.input_max_abs > 0.0);
}

#[test]
fn training_rejects_short_trajectories() {
    let data = small_dataset();
    let cfg = TrainConfig {
        rollout_steps: 9,
        ..quick_train()
    };
    let mut op = build_operator::<f64>(&small_fno(), 3).unwrap();
    let err = train(op.as_mut(), &data, &cfg, &CorrectionSpec::default(), None).unwrap_err();
    assert!(err.to_string().contains("trajectory 0"), "{err}");
}

#[test]
fn persistence_on_a_stationary_flow_scores_zero_error() {
    let solver = SolverConfig {
        nx: 16,
        ny: 16,
        n_frames: 6,
        save_every: 2,
        ..SolverConfig::default()
    };
    let grid = solver.grid().unwrap();
    let still = conserve_core::data::solve(&solver, &PrimitiveState::uniform(grid, 1.0, 1.0, [0.0; 2]).unwrap()).unwrap();
    let op = build_operator::<f64>(
        &OperatorConfig {
            arch: Arch::Persistence,
            nx: 16,
            ny: 16,
            ..OperatorConfig::default()
        },
        0,
    )
    .unwrap();
    let evals = evaluate(op.as_ref(), Some(&CorrectionSpec::default()), &[still], 2, 1).unwrap();
    assert_eq!(evals[0].result.overall_error, vec![0.0]);
    assert_eq!(evals[0].conserved_error, vec![0.0]);
}

#[test]
fn evaluation_checks_lengths() {
    let data = small_dataset();
    let op = build_operator::<f64>(&small_fno(), 3).unwrap();
    assert!(evaluate(op.as_ref(), None, &data, 5, 10).is_err());
    assert!(evaluate(op.as_ref(), None, &data, 0, 2).is_err());
    let ok = evaluate(op.as_ref(), None, &data, 1, 3).unwrap();
    assert_eq!(ok.len(), 4);
    assert_eq!(ok[2].result.overall_error.len(), 3);
}
