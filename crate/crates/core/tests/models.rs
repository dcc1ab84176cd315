use std::f64::consts::PI;
use std::sync::Arc;

use conserve_core::autograd::Graph;
use conserve_core::field::{primitive_to_conserved, ConservedState, Grid2D, PrimitiveState};
use conserve_core::models::{
    build_operator, load_checkpoint, raw_output, save_checkpoint, spectral_conv, Arch, DpotOperator, FnoOperator,
    Normalization, OperatorConfig, StepOperator,
};
use conserve_core::spectral::{fft2, signed_frequency, ModeMask, ModeSet, SpectralPlan};
use conserve_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_state(nx: usize, ny: usize, seed: u64) -> ConservedState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid2D::unit(nx, ny).unwrap();
    let n = nx * ny;
    let rho = (0..n).map(|_| rng.gen_range(0.8..1.2)).collect();
    let p = (0..n).map(|_| rng.gen_range(0.8..1.2)).collect();
    let u = [
        (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    ];
    primitive_to_conserved(&PrimitiveState::new(grid, rho, p, u).unwrap()).unwrap()
}

fn full_plan(n: usize) -> Arc<SpectralPlan<f64>> {
    Arc::new(SpectralPlan::new(ModeSet::new(n, n, n / 2, ModeMask::Block).unwrap()))
}

fn run_spectral_conv(x: &Tensor<f64>, wr: &Tensor<f64>, wi: &Tensor<f64>, plan: &Arc<SpectralPlan<f64>>) -> Vec<f64> {
    let mut g = Graph::new();
    let (x, wr, wi) = (g.constant(x.clone()), g.constant(wr.clone()), g.constant(wi.clone()));
    let y = spectral_conv(&mut g, x, wr, wi, plan).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn spectral_conv_identity_weights_full_spectrum() {
    let n = 8;
    let plan = full_plan(n);
    let k = plan.modes().len();
    assert_eq!(k, n * n);
    let c = 3;
    let mut wr = vec![0.0; c * c * k];
    for i in 0..c {
        for m in 0..k {
            wr[(i * c + i) * k + m] = 1.0;
        }
    }
    let wr = Tensor::from_vec(&[c, c, k], wr).unwrap();
    let wi = Tensor::zeros(&[c, c, k]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&[c, n, n], &mut rng);
    let y = run_spectral_conv(&x, &wr, &wi, &plan);
    for (a, b) in y.iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn spectral_conv_scales_a_retained_sinusoid() {
    let n = 16;
    let plan = Arc::new(SpectralPlan::new(ModeSet::new(n, n, 4, ModeMask::Disk).unwrap()));
    let k = plan.modes().len();
    let x: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            (2.0 * PI * (2.0 * i as f64 + 1.0 * j as f64) / n as f64).cos()
        })
        .collect();
    let x = Tensor::from_vec(&[1, n, n], x).unwrap();
    let wr = Tensor::full(&[1, 1, k], 2.0);
    let wi = Tensor::zeros(&[1, 1, k]);
    let y = run_spectral_conv(&x, &wr, &wi, &plan);
    for (a, b) in y.iter().zip(x.data()) {
        assert!((a - 2.0 * b).abs() < 1e-10);
    }
}

/// Direct O(n^4) circular convolution with the kernel synthesised from the
/// per-mode weights.
fn circular_convolution_oracle(x: &Tensor<f64>, wr: &Tensor<f64>, wi: &Tensor<f64>, modes: &ModeSet) -> Vec<f64> {
    let (nx, ny) = modes.dims();
    let (cin, cout, k) = (wr.shape()[0], wr.shape()[1], wr.shape()[2]);
    let freqs: Vec<(usize, usize)> = modes.indices().collect();
    assert_eq!(freqs.len(), k);
    let n = (nx * ny) as f64;
    let mut out = vec![0.0; cout * nx * ny];
    for i in 0..cin {
        for o in 0..cout {
            // Re kernel(d), kernel(d) = (1/N) sum_k W(k) exp(+2 pi i k.d); x is real
            let mut ker_re = vec![0.0; nx * ny];
            for dx in 0..nx {
                for dy in 0..ny {
                    let mut re = 0.0;
                    for (s, &(kx, ky)) in freqs.iter().enumerate() {
                        let phase = 2.0 * PI * (kx as f64 * dx as f64 / nx as f64 + ky as f64 * dy as f64 / ny as f64);
                        let (a, b) = (wr.data()[(i * cout + o) * k + s], wi.data()[(i * cout + o) * k + s]);
                        re += a * phase.cos() - b * phase.sin();
                    }
                    ker_re[dx * ny + dy] = re / n;
                }
            }
            for px in 0..nx {
                for py in 0..ny {
                    let mut acc = 0.0;
                    for qx in 0..nx {
                        for qy in 0..ny {
                            let d = ((px + nx - qx) % nx) * ny + (py + ny - qy) % ny;
                            acc += ker_re[d] * x.data()[i * nx * ny + qx * ny + qy];
                        }
                    }
                    out[o * nx * ny + px * ny + py] += acc;
                }
            }
        }
    }
    out
}

#[test]
fn spectral_conv_matches_direct_circular_convolution() {
    let n = 8;
    let plan = full_plan(n);
    let k = plan.modes().len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cin, cout) = (2, 3);
    let x = random_tensor(&[cin, n, n], &mut rng);
    let wr = random_tensor(&[cin, cout, k], &mut rng);
    let wi = random_tensor(&[cin, cout, k], &mut rng);
    let fast = run_spectral_conv(&x, &wr, &wi, &plan);
    let slow = circular_convolution_oracle(&x, &wr, &wi, plan.modes());
    let scale = slow.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(err / scale < 1e-6, "relative error {}", err / scale);
}

fn disk_count(m: i64) -> usize {
    let mut c = 0;
    for kx in -m..=m {
        for ky in -m..=m {
            if kx * kx + ky * ky <= m * m {
                c += 1;
            }
        }
    }
    c
}

#[test]
fn fno_parameter_count_closed_form() {
    let cfg = OperatorConfig::default();
    assert_eq!((cfg.modes, cfg.width, cfg.depth), (12, 32, 4));
    let op = FnoOperator::<f64>::new(cfg.clone(), 0).unwrap();
    let (w, d, h) = (cfg.width, cfg.depth, cfg.history);
    let k = disk_count(cfg.modes as i64);
    let cin = 4 * h + 2;
    let expected = 2 * 4 * h          // normalization affine
        + w * cin + w                 // lift
        + d * (2 * w * w * k          // spectral weights
            + 3 * (w * w + w))        // skip + two mlp layers
        + 2 * w * w * k               // head
        + 4 * w + 4; // projection
    assert_eq!(op.params().count(), expected);
}

fn window(nx: usize, ny: usize, seed: u64) -> Vec<ConservedState> {
    vec![random_state(nx, ny, seed), random_state(nx, ny, seed + 1)]
}

#[test]
fn forward_is_deterministic_for_both_archs() {
    for arch in [Arch::Fno, Arch::Dpot] {
        let cfg = OperatorConfig {
            arch,
            nx: 16,
            ny: 16,
            modes: 4,
            width: 8,
            depth: 2,
            heads: 2,
            ..Default::default()
        };
        let op = build_operator::<f64>(&cfg, 3).unwrap();
        let w = window(16, 16, 1);
        let a = raw_output(op.as_ref(), &w).unwrap();
        let b = raw_output(op.as_ref(), &w).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.is_finite());
        assert_eq!(a.shape(), &[4, 16, 16]);
    }
}

#[test]
fn zeroed_fno_outputs_its_projection_bias() {
    let cfg = OperatorConfig {
        nx: 8,
        ny: 8,
        modes: 2,
        width: 4,
        depth: 1,
        normalization: Normalization::None,
        ..Default::default()
    };
    let mut op = FnoOperator::<f64>::new(cfg, 1).unwrap();
    let store = op.params_mut();
    for i in 0..store.len() {
        store.get_mut(i).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let last = store.len() - 1;
    store.get_mut(last).data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let out = raw_output(&op, &window(8, 8, 2)).unwrap();
    for c in 0..4 {
        assert!(out.row(c).iter().all(|v| *v == (c + 1) as f64));
    }
}

fn energy_outside_disk(field: &[f64], n: usize, m: usize) -> (f64, f64) {
    let spec = fft2(field, n, n);
    let (mut outside, mut total) = (0.0, 0.0);
    for ix in 0..n {
        for iy in 0..n {
            let (kx, ky) = (signed_frequency(ix, n), signed_frequency(iy, n));
            let e = spec[ix * n + iy].norm_sqr();
            total += e;
            if (kx * kx + ky * ky) as f64 > (m * m) as f64 {
                outside += e;
            }
        }
    }
    (outside, total)
}

#[test]
fn fno_output_is_band_limited_dpot_is_not() {
    let n = 32;
    let m = 4;
    let w = window(n, n, 7);
    let fno = build_operator::<f64>(
        &OperatorConfig {
            nx: n,
            ny: n,
            modes: m,
            width: 8,
            depth: 2,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let out = raw_output(fno.as_ref(), &w).unwrap();
    for c in 0..4 {
        let (outside, total) = energy_outside_disk(out.row(c), n, m);
        assert!(outside <= 1e-10 * total, "fno channel {c}: {outside} of {total}");
    }
    let dpot = build_operator::<f64>(
        &OperatorConfig {
            arch: Arch::Dpot,
            nx: n,
            ny: n,
            modes: m,
            width: 8,
            depth: 2,
            heads: 2,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let out = raw_output(dpot.as_ref(), &w).unwrap();
    let (outside, total) = energy_outside_disk(out.row(0), n, m);
    assert!(outside > 1e-6 * total, "dpot: {outside} of {total}");
}

#[test]
fn patch_encode_decode_with_tied_weights_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (c, n, p) = (2, 8, 2);
    let x = random_tensor(&[c, n, n], &mut rng);
    // an orthogonal embedding (signed permutation) and its transpose
    let d = c * p * p;
    let mut e = vec![0.0; d * d];
    for r in 0..d {
        e[r * d + (r * 3 + 1) % d] = if r % 2 == 0 { 1.0 } else { -1.0 };
    }
    let mut et = vec![0.0; d * d];
    for r in 0..d {
        for s in 0..d {
            et[s * d + r] = e[r * d + s];
        }
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ev = g.constant(Tensor::from_vec(&[d, d], e).unwrap());
    let etv = g.constant(Tensor::from_vec(&[d, d], et).unwrap());
    let tokens = g.patchify(xv, p).unwrap();
    assert_eq!(g.value(tokens).shape(), &[d, n / p, n / p]);
    let emb = g.linear(tokens, ev, None).unwrap();
    let dec = g.linear(emb, etv, None).unwrap();
    let back = g.unpatchify(dec, p).unwrap();
    for (a, b) in g.value(back).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dpot_clamps_token_modes() {
    let cfg = OperatorConfig {
        arch: Arch::Dpot,
        nx: 32,
        ny: 32,
        modes: 12,
        width: 8,
        depth: 1,
        heads: 2,
        ..Default::default()
    };
    let op = DpotOperator::<f64>::new(cfg, 0).unwrap();
    assert_eq!(op.token_plan().modes().modes(), 4);
}

#[test]
fn internal_normalization_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 64;
    let mut data: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-3.0..5.0)).collect();
    data[n..].iter_mut().for_each(|v| *v = 4.2); // constant channel
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[2, n], data).unwrap());
    let gamma = g.constant(Tensor::from_vec(&[2], vec![-1.5, 2.0]).unwrap());
    let beta = g.constant(Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
    let y = g.instance_norm(x, gamma, beta).unwrap();
    let out = g.value(y);
    // roundoff in the mean is amplified by 1/sqrt(eps)
    assert!(out.row(1).iter().all(|v| (*v + 0.7).abs() < 1e-10));
    let r = out.row(0);
    let mean = r.iter().sum::<f64>() / n as f64;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    assert!((mean - 0.3).abs() < 1e-12);
    assert!((std - 1.5).abs() < 1e-4);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for arch in [Arch::Fno, Arch::Dpot, Arch::Persistence] {
        let cfg = OperatorConfig {
            arch,
            nx: 16,
            ny: 16,
            modes: 4,
            width: 8,
            depth: 1,
            heads: 2,
            ..Default::default()
        };
        let op = build_operator::<f64>(&cfg, 17).unwrap();
        let path = dir.path().join(format!("{arch:?}.ckpt"));
        save_checkpoint(&path, op.as_ref(), serde_json::json!({"epoch": 3})).unwrap();
        let (loaded, header) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(header.config, cfg);
        assert_eq!(header.metadata["epoch"], 3);
        let w = window(16, 16, 4);
        let a = raw_output(op.as_ref(), &w).unwrap();
        let b = raw_output(loaded.as_ref(), &w).unwrap();
        assert_eq!(a.data(), b.data());
    }
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"nonsense-bytes-here").unwrap();
    assert!(load_checkpoint::<f32>(&bad).is_err());
}

#[test]
fn single_precision_operator_runs() {
    let cfg = OperatorConfig {
        nx: 16,
        ny: 16,
        modes: 4,
        width: 8,
        depth: 1,
        ..Default::default()
    };
    let op = build_operator::<f32>(&cfg, 2).unwrap();
    let out = raw_output(op.as_ref(), &window(16, 16, 3)).unwrap();
    assert!(out.is_finite());
}
