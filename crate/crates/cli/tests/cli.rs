use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conserve_core::data::write_dataset;
use conserve_core::field::{primitive_to_conserved, Grid2D, PrimitiveState, Trajectory};
use conserve_core::models::{build_operator, save_checkpoint, Arch, OperatorConfig};
use conserve_core::Precision;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conserve"))
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn tiny_config_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run_dir) = (dir.path().join("data"), dir.path().join("run"));
    let cfg = tiny_config();
    let o = run(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(&data));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    assert!(data.join("dataset.json").exists() && data.join("split.json").exists());

    let o = run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run_dir).arg("--data").arg(&data));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(header(&run_dir.join("train_log.csv")), "epoch,loss,lr,wall_time");
    let ckpt = run_dir.join("model.ckpt");
    assert!(ckpt.exists());

    for cmd in ["eval", "rollout", "spectra"] {
        let out = dir.path().join(cmd);
        let o = run(
            bin().arg(cmd).arg("--config").arg(&cfg).arg("--out").arg(&out).arg("--data").arg(&data).arg("--checkpoint").arg(&ckpt),
        );
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
        assert!(out.join("resolved_config.toml").exists());
    }
    let eval = dir.path().join("eval");
    assert!(header(&eval.join("eval_summary.csv")).starts_with("model,correction,samples,horizon,avg_error,error_t1"));
    assert!(eval.join("eval_steps.csv").exists() && eval.join("eval_report.json").exists());
    let roll = dir.path().join("rollout");
    for f in ["drift.csv", "error_vs_time.csv", "figures/error_vs_time.svg", "figures/drift.svg"] {
        assert!(roll.join(f).exists(), "{f}");
    }
    assert!(roll.join("trajectories/corrected").is_dir() && roll.join("trajectories/uncorrected").is_dir());
    let spec = dir.path().join("spectra");
    for f in ["spectra.csv", "cutoff.csv", "spectra_summary.json", "figures/spectrum_tke.svg"] {
        assert!(spec.join(f).exists(), "{f}");
    }
    let svg = std::fs::read_to_string(spec.join("figures/spectrum_rho.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn resolved_config_reloads_to_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = run(bin().args(["gen-data", "--config"]).arg(tiny_config()).arg("--out").arg(&a).args(["--seed", "9"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let archived = a.join("resolved_config.toml");
    let text = std::fs::read_to_string(&archived).unwrap();
    assert!(text.contains("seed = 9"));
    let b = dir.path().join("b");
    let o = run(bin().args(["gen-data", "--config"]).arg(&archived).arg("--out").arg(&b));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(text, std::fs::read_to_string(b.join("resolved_config.toml")).unwrap());
    for f in ["sample_00000/rho.bin", "split.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn unknown_config_key_exits_with_named_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nepochz = 3\n").unwrap();
    let o = run(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("epochz"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[correction]\nmom_x = \"magnitude\"\n").unwrap();
    let o = run(bin().args(["gen-data", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("correction.mom_x"));
    let o = run(bin().args(["gen-data", "--precision", "half", "--out"]).arg(dir.path().join("o")));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        bin().args(["train", "--config"]).arg(tiny_config()).arg("--out").arg(dir.path().join("o")).arg("--data").arg(dir.path().join("nowhere")),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

/// Constant-in-time uniform trajectories: the exact answer is persistence.
fn stationary_dataset(dir: &Path) {
    let grid = Grid2D::unit(8, 8).unwrap();
    let trajs: Vec<_> = (0..4)
        .map(|i| {
            let s = PrimitiveState::uniform(grid, 1.0 + 0.1 * i as f64, 1.0, [0.1, -0.2]).unwrap();
            let c = primitive_to_conserved(&s).unwrap();
            Trajectory::new(0.1, vec![c; 6]).unwrap()
        })
        .collect();
    write_dataset(dir, &trajs, Precision::Double, serde_json::Value::Null).unwrap();
}

#[test]
fn identity_checkpoint_scores_zero_error_at_horizon_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stationary_dataset(&data);
    let op_cfg = OperatorConfig {
        arch: Arch::Persistence,
        nx: 8,
        ny: 8,
        ..OperatorConfig::default()
    };
    let ckpt = dir.path().join("identity.ckpt");
    let op = build_operator::<f64>(&op_cfg, 0).unwrap();
    save_checkpoint(&ckpt, op.as_ref(), serde_json::Value::Null).unwrap();
    let cfg = dir.path().join("eval.toml");
    std::fs::write(&cfg, "[data]\nsplit = [0.5, 0.0, 0.5]\n\n[eval]\nseed_time = 1\nreport_steps = [1]\n").unwrap();
    let out = dir.path().join("eval");
    let o = run(
        bin().args(["eval", "--horizon", "1", "--config"]).arg(&cfg).arg("--out").arg(&out).arg("--data").arg(&data).arg("--checkpoint").arg(&ckpt),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("eval_summary.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(summary.as_bytes());
    let head = rows.headers().unwrap().clone();
    let row = rows.records().next().unwrap().unwrap();
    let col = |name: &str| row[head.iter().position(|h| h == name).unwrap()].to_string();
    assert_eq!(col("model"), "persistence");
    assert_eq!(col("horizon"), "1");
    assert_eq!(col("avg_error").parse::<f64>().unwrap(), 0.0);
    assert_eq!(col("error_t1").parse::<f64>().unwrap(), 0.0);
    // checkpoint precision is used when --precision is absent
    assert!(std::fs::read_to_string(out.join("resolved_config.toml")).unwrap().contains("precision = \"double\""));
}

#[test]
fn grid_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stationary_dataset(&data);
    let o = run(bin().args(["train", "--config"]).arg(tiny_config()).arg("--out").arg(dir.path().join("o")).arg("--data").arg(&data));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("operator.nx"));
}
