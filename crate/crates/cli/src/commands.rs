//! Subcommand implementations. Every command archives its resolved config in
//! the output directory before doing any work.

use std::path::{Path, PathBuf};

use conserve_core::correction::{conservation_drift, CorrectionSpec};
use conserve_core::data::{
    generate_dataset, load_pdebench, read_dataset, split_indices, write_dataset, write_trajectory, Split,
};
use conserve_core::field::{ConservedState, State, Trajectory};
use conserve_core::metrics::{high_correlation_duration, summarize, Report, RolloutResult};
use conserve_core::models::{build_operator, load_checkpoint, read_checkpoint_header, save_checkpoint, StepOperator};
use conserve_core::spectra::{spectrum_vs_time, state_spectra, SpectrumResult, NORMALIZATION};
use conserve_core::training::{evaluate, train, Evaluation};
use conserve_core::{Error, Precision, Real, Result};
use serde_json::json;

use crate::config::{Device, RunConfig, SplitName, SpectrumSpace};
use crate::output::{ensure_dir, num, opt, write_json, write_text, Table};
use crate::plots::{heatmaps, line_chart, spectrogram, Panel, Series};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const SPLIT_FILE: &str = "split.json";

/// Resolved configuration plus the output directory.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    /// `--precision` as given; eval-type commands otherwise follow the checkpoint.
    pub precision_flag: Option<Precision>,
}

impl Ctx {
    fn archive(&self) -> Result<()> {
        ensure_dir(&self.out)?;
        if self.cfg.device == Device::Auto {
            log::info!("device auto resolved to cpu");
        }
        write_text(&self.out.join(RESOLVED_CONFIG), &self.cfg.to_toml())
    }
}

macro_rules! dispatch {
    ($p:expr, $f:ident($($a:expr),*)) => {
        match $p {
            Precision::Single => $f::<f32>($($a),*),
            Precision::Double => $f::<f64>($($a),*),
        }
    };
}

fn enum_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(ctx: Ctx) -> Result<()> {
    ctx.archive()?;
    let cfg = &ctx.cfg;
    let (trajectories, provenance) = match &cfg.data.pdebench {
        Some(src) => {
            log::info!("importing samples {:?} from {}", src.samples, src.path.display());
            let t = load_pdebench(&src.path, src.samples[0]..src.samples[1], src.downsample.map(|d| (d[0], d[1])))?;
            (t, json!({ "source": "pdebench", "path": src.path, "samples": src.samples }))
        }
        None => {
            log::info!(
                "solving {} trajectories on {}x{}",
                cfg.data.trajectories,
                cfg.solver.nx,
                cfg.solver.ny
            );
            let t = generate_dataset(&cfg.solver, &cfg.ic, cfg.data.trajectories, cfg.seed)?;
            let prov = json!({
                "source": "generated",
                "note": "self-generated reference data; not the published benchmark",
                "seed": cfg.seed,
                "solver": cfg.solver,
                "ic": cfg.ic,
            });
            (t, prov)
        }
    };
    write_dataset(&ctx.out, &trajectories, cfg.data.storage, provenance)?;
    let split = split_indices(trajectories.len(), cfg.data.split, cfg.seed)?;
    write_json(&ctx.out.join(SPLIT_FILE), &split)?;
    log::info!(
        "wrote {} trajectories of {} frames to {}",
        trajectories.len(),
        trajectories.first().map_or(0, |t| t.len()),
        ctx.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- data access

struct Loaded {
    dir: PathBuf,
    trajectories: Vec<Trajectory<ConservedState>>,
    split: Split,
}

fn load_data(cfg: &RunConfig, flag: Option<&Path>) -> Result<Loaded> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| Error::config("data.dir", "no dataset given; pass --data or set data.dir"))?;
    let trajectories = read_dataset(&dir)?;
    let split_path = dir.join(SPLIT_FILE);
    let split = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let split: Split =
            serde_json::from_str(&text).map_err(|e| Error::format(split_path.display().to_string(), e.to_string()))?;
        if let Some(i) = split.train.iter().chain(&split.val).chain(&split.test).find(|&&i| i >= trajectories.len()) {
            return Err(Error::format(
                split_path.display().to_string(),
                format!("index {i} out of range for {} trajectories", trajectories.len()),
            ));
        }
        split
    } else {
        split_indices(trajectories.len(), cfg.data.split, cfg.seed)?
    };
    log::info!("loaded {} trajectories from {}", trajectories.len(), dir.display());
    Ok(Loaded {
        dir,
        trajectories,
        split,
    })
}

fn members(split: &Split, name: SplitName, n: usize) -> Vec<usize> {
    match name {
        SplitName::Train => split.train.clone(),
        SplitName::Val => split.val.clone(),
        SplitName::Test => split.test.clone(),
        SplitName::All => (0..n).collect(),
    }
}

fn subset(loaded: &Loaded, idx: &[usize]) -> Vec<Trajectory<ConservedState>> {
    idx.iter().map(|&i| loaded.trajectories[i].clone()).collect()
}

fn check_grid(op_nx: usize, op_ny: usize, data: &[Trajectory<ConservedState>]) -> Result<()> {
    if let Some(t) = data.first() {
        if (t.grid.nx, t.grid.ny) != (op_nx, op_ny) {
            return Err(Error::config(
                "operator.nx",
                format!(
                    "operator grid {op_nx}x{op_ny} does not match the data grid {}x{}",
                    t.grid.nx, t.grid.ny
                ),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- train

pub fn train_cmd(ctx: Ctx, data: Option<&Path>) -> Result<()> {
    ctx.archive()?;
    let loaded = load_data(&ctx.cfg, data)?;
    dispatch!(ctx.cfg.precision, train_impl(&ctx, &loaded))
}

fn train_impl<T: Real>(ctx: &Ctx, loaded: &Loaded) -> Result<()> {
    let cfg = &ctx.cfg;
    let set = subset(loaded, &loaded.split.train);
    if set.is_empty() {
        return Err(Error::Empty("training split has no trajectories".into()));
    }
    check_grid(cfg.operator.nx, cfg.operator.ny, &set)?;
    let mut op = build_operator::<T>(&cfg.operator, cfg.seed)?;
    log::info!(
        "training {} ({} parameters, {}) on {} trajectories",
        enum_name(&cfg.operator.arch),
        op.params().count(),
        cfg.precision,
        set.len()
    );
    let ckdir = ctx.out.join("checkpoints");
    if cfg.training.checkpoint_every > 0 {
        ensure_dir(&ckdir)?;
    }
    let history = train(op.as_mut(), &set, &cfg.training, &cfg.correction, Some(&ckdir))?;

    let mut log = Table::new(["epoch", "loss", "lr", "wall_time"]);
    for e in &history.epochs {
        log.push(vec![e.epoch.to_string(), num(e.loss), num(e.lr), num(e.wall_time)]);
    }
    log.write(&ctx.out.join("train_log.csv"))?;
    write_json(&ctx.out.join("train_history.json"), &history)?;

    let last = history.epochs.last();
    save_checkpoint(
        &ctx.out.join("model.ckpt"),
        op.as_ref(),
        json!({
            "epochs": history.epochs.len(),
            "final_loss": last.map(|e| e.loss),
            "seed": cfg.seed,
            "correction": cfg.correction,
            "dataset": loaded.dir,
        }),
    )?;
    if last.is_some_and(|e| e.aborted) {
        return Err(Error::Diverged(
            "last epoch hit a non-finite loss; see train_history.json".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------- shared rollout plumbing

fn checkpoint_precision(ctx: &mut Ctx, ckpt: &Path) -> Result<Precision> {
    let header = read_checkpoint_header(ckpt)?;
    let p = ctx.precision_flag.unwrap_or(header.precision);
    ctx.cfg.precision = p;
    ctx.cfg.training.precision = p;
    Ok(p)
}

fn correction_for(cfg: &RunConfig, enabled: bool) -> Option<&CorrectionSpec> {
    (enabled && cfg.correction.is_enabled()).then_some(&cfg.correction)
}

fn eval_set(loaded: &Loaded, name: SplitName) -> Result<(Vec<usize>, Vec<Trajectory<ConservedState>>)> {
    let idx = members(&loaded.split, name, loaded.trajectories.len());
    if idx.is_empty() {
        return Err(Error::Empty(format!("{} split has no trajectories", enum_name(&name))));
    }
    let set = subset(loaded, &idx);
    Ok((idx, set))
}

fn load_op<T: Real>(ckpt: &Path, data: &[Trajectory<ConservedState>]) -> Result<Box<dyn StepOperator<T>>> {
    let (op, header) = load_checkpoint::<T>(ckpt)?;
    check_grid(header.config.nx, header.config.ny, data)?;
    Ok(op)
}

// ---------------------------------------------------------------- eval

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub horizon: Option<usize>,
    pub no_correction: bool,
}

pub fn eval_cmd(mut ctx: Ctx, args: EvalArgs<'_>) -> Result<()> {
    if let Some(h) = args.horizon {
        ctx.cfg.eval.horizon = h;
    }
    ctx.cfg.eval.validate()?;
    let p = checkpoint_precision(&mut ctx, args.checkpoint)?;
    ctx.archive()?;
    let loaded = load_data(&ctx.cfg, args.data)?;
    dispatch!(p, eval_impl(&ctx, &loaded, &args))
}

fn eval_impl<T: Real>(ctx: &Ctx, loaded: &Loaded, args: &EvalArgs<'_>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (idx, set) = eval_set(loaded, cfg.data.eval_split)?;
    let op = load_op::<T>(args.checkpoint, &set)?;
    let spec = correction_for(cfg, !args.no_correction);
    log::info!(
        "evaluating {} trajectories, horizon {}, correction {}",
        set.len(),
        cfg.eval.horizon,
        if spec.is_some() { "on" } else { "off" }
    );
    let evals = evaluate(op.as_ref(), spec, &set, cfg.eval.seed_time, cfg.eval.horizon)?;
    let results: Vec<RolloutResult> = evals.iter().map(|e| e.result.clone()).collect();
    let report = summarize(&results, &cfg.eval.report_steps, cfg.eval.correlation_threshold)?;

    let model = enum_name(&op.config().arch);
    let correction = if spec.is_some() { "corrected" } else { "uncorrected" };
    summary_table(&model, correction, &report, evals.iter().map(|e| e.result.clamped_cells).sum())
        .write(&ctx.out.join("eval_summary.csv"))?;
    steps_table(&idx, &evals, cfg.eval.correlation_threshold).write(&ctx.out.join("eval_steps.csv"))?;
    write_json(
        &ctx.out.join("eval_report.json"),
        &json!({
            "model": model,
            "correction": correction,
            "precision": cfg.precision,
            "checkpoint": args.checkpoint,
            "split": cfg.data.eval_split,
            "trajectories": idx,
            "report": report,
        }),
    )?;
    if report.diverged > 0 {
        log::warn!("{} of {} rollouts diverged", report.diverged, report.samples);
    }
    log::info!("average error {:.6e}", report.avg_error);
    Ok(())
}

fn summary_table(model: &str, correction: &str, r: &Report, clamped: usize) -> Table {
    let mut header: Vec<String> = ["model", "correction", "samples", "horizon", "avg_error"]
        .map(String::from)
        .to_vec();
    header.extend(r.error_at.iter().map(|(t, _)| format!("error_t{t}")));
    header.extend(
        [
            "err_rho",
            "err_p",
            "err_u",
            "growth_per_step",
            "mean_duration",
            "diverged",
            "degenerate_events",
            "clamped_cells",
        ]
        .map(String::from),
    );
    let mut row = vec![
        model.to_string(),
        correction.to_string(),
        r.samples.to_string(),
        r.horizon.to_string(),
        num(r.avg_error),
    ];
    row.extend(r.error_at.iter().map(|(_, v)| opt(*v)));
    row.extend(r.channel_avg_error.iter().map(|v| num(*v)));
    row.extend([
        opt(r.error_growth_per_step),
        num(r.mean_duration),
        r.diverged.to_string(),
        r.degenerate_events.to_string(),
        clamped.to_string(),
    ]);
    let mut t = Table::new(header);
    t.push(row);
    t
}

fn steps_table(idx: &[usize], evals: &[Evaluation], threshold: f64) -> Table {
    let mut t = Table::new([
        "trajectory",
        "step",
        "error",
        "err_rho",
        "err_p",
        "err_u",
        "corr_rho",
        "corr_p",
        "corr_u_x",
        "corr_u_y",
        "corr_mean",
        "conserved_error",
        "duration",
    ]);
    for e in evals {
        let r = &e.result;
        let agg = r.aggregate_correlation();
        let duration = high_correlation_duration(r, threshold);
        for s in 0..r.overall_error.len() {
            let mut row = vec![idx[r.sample].to_string(), (s + 1).to_string(), num(r.overall_error[s])];
            row.extend(r.channel_error[s].iter().map(|v| num(*v)));
            row.extend(r.correlation[s].iter().map(|v| opt(*v)));
            row.push(opt(agg[s]));
            row.push(opt(e.conserved_error.get(s).copied()));
            row.push(duration.to_string());
            t.push(row);
        }
    }
    t
}

// ---------------------------------------------------------------- rollout

pub fn rollout_cmd(mut ctx: Ctx, checkpoint: &Path, data: Option<&Path>, horizon: Option<usize>) -> Result<()> {
    if let Some(h) = horizon {
        ctx.cfg.rollout.horizon = h;
    }
    let p = checkpoint_precision(&mut ctx, checkpoint)?;
    ctx.cfg.validate()?;
    ctx.archive()?;
    let loaded = load_data(&ctx.cfg, data)?;
    dispatch!(p, rollout_impl(&ctx, &loaded, checkpoint))
}

fn pick(idx: &[usize], positions: &[usize], field: &str) -> Result<Vec<usize>> {
    positions
        .iter()
        .map(|&p| {
            idx.get(p).copied().ok_or_else(|| {
                Error::config(field, format!("position {p} is outside the evaluation split of {}", idx.len()))
            })
        })
        .collect()
}

fn rollout_impl<T: Real>(ctx: &Ctx, loaded: &Loaded, checkpoint: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let rc = &cfg.rollout;
    let (idx, _) = eval_set(loaded, cfg.data.eval_split)?;
    let chosen = pick(&idx, &rc.samples, "rollout.samples")?;
    let set = subset(loaded, &chosen);
    let op = load_op::<T>(checkpoint, &set)?;
    let mut variants = vec![("uncorrected", None)];
    if let Some(spec) = correction_for(cfg, true) {
        variants.insert(0, ("corrected", Some(spec)));
    }
    let figures = ctx.out.join("figures");
    if rc.images {
        ensure_dir(&figures)?;
    }
    let eps = cfg.correction.denominator_epsilon;
    let mut errors = Table::new(["variant", "trajectory", "step", "error", "conserved_error", "corr_mean"]);
    let mut drift = Table::new(["variant", "trajectory", "t", "channel", "drift"]);
    let mut error_series = Vec::new();
    let mut drift_series = Vec::new();

    let reference: Vec<Trajectory<ConservedState>> = set
        .iter()
        .map(|t| t.slice(rc.seed_time..(rc.seed_time + rc.horizon + 1).min(t.len())))
        .collect::<Result<_>>()?;
    for (traj, &ti) in reference.iter().zip(&chosen) {
        for d in conservation_drift(traj, eps)? {
            drift.push(vec!["reference".into(), ti.to_string(), d.t.to_string(), d.channel, num(d.drift)]);
        }
    }

    for (name, spec) in &variants {
        log::info!("{name} rollout of {} trajectories for {} steps", set.len(), rc.horizon);
        let evals = evaluate(op.as_ref(), *spec, &set, rc.seed_time, rc.horizon)?;
        let mut mean = vec![(0.0, 0usize); rc.horizon];
        for e in &evals {
            let ti = chosen[e.result.sample];
            let agg = e.result.aggregate_correlation();
            for (s, err) in e.result.overall_error.iter().enumerate() {
                errors.push(vec![
                    name.to_string(),
                    ti.to_string(),
                    (s + 1).to_string(),
                    num(*err),
                    opt(e.conserved_error.get(s).copied()),
                    opt(agg[s]),
                ]);
                mean[s].0 += err;
                mean[s].1 += 1;
            }
            let points = conservation_drift(&e.conserved, eps)?;
            if e.result.sample == 0 {
                for ch in ["rho", "mom_x", "mom_y"] {
                    drift_series.push(Series {
                        label: format!("{name} {ch}"),
                        points: points
                            .iter()
                            .filter(|p| p.channel == ch)
                            .map(|p| (p.t as f64, p.drift))
                            .collect(),
                    });
                }
            }
            for d in points {
                drift.push(vec![name.to_string(), ti.to_string(), d.t.to_string(), d.channel, num(d.drift)]);
            }
            write_trajectory(
                &ctx.out.join("trajectories").join(name).join(format!("sample_{ti:05}")),
                &e.conserved,
                Precision::Double,
                json!({ "checkpoint": checkpoint, "variant": name, "trajectory": ti, "seed_time": rc.seed_time }),
            )?;
            if rc.images {
                final_frame_figure(&figures.join(format!("final_{name}_sample_{ti:05}.svg")), name, &e.result)?;
            }
        }
        error_series.push(Series {
            label: name.to_string(),
            points: mean
                .iter()
                .enumerate()
                .filter(|(_, m)| m.1 > 0)
                .map(|(s, m)| ((s + 1) as f64, m.0 / m.1 as f64))
                .collect(),
        });
    }
    errors.write(&ctx.out.join("error_vs_time.csv"))?;
    drift.write(&ctx.out.join("drift.csv"))?;
    if rc.images {
        line_chart(
            &figures.join("error_vs_time.svg"),
            "mean relative error",
            "step",
            "error",
            &error_series,
            false,
        )?;
        line_chart(&figures.join("drift.svg"), "conservation drift", "step", "relative drift", &drift_series, true)?;
    }
    Ok(())
}

fn final_frame_figure(path: &Path, variant: &str, r: &RolloutResult) -> Result<()> {
    let t = r.predicted.len() - 1;
    let (pred, truth) = (&r.predicted.states[t], &r.truth.states[t]);
    let g = truth.grid;
    let err: Vec<f64> = pred.rho.iter().zip(&truth.rho).map(|(a, b)| (a - b).abs()).collect();
    let panel = |title: &str, values: Vec<f64>| Panel {
        title: title.into(),
        values,
        rows: g.nx,
        cols: g.ny,
    };
    heatmaps(
        path,
        &format!("density at step {t} ({variant})"),
        &[
            panel("reference", truth.rho.clone()),
            panel("prediction", pred.rho.clone()),
            panel("|error|", err),
        ],
    )
}

// ---------------------------------------------------------------- spectra

pub fn spectra_cmd(mut ctx: Ctx, checkpoint: &Path, data: Option<&Path>, horizon: Option<usize>) -> Result<()> {
    if let Some(h) = horizon {
        ctx.cfg.spectra.horizon = h;
    }
    let p = checkpoint_precision(&mut ctx, checkpoint)?;
    ctx.cfg.validate()?;
    ctx.archive()?;
    let loaded = load_data(&ctx.cfg, data)?;
    dispatch!(p, spectra_impl(&ctx, &loaded, checkpoint))
}

type Labeled = (String, Vec<SpectrumResult>);

fn spectra_impl<T: Real>(ctx: &Ctx, loaded: &Loaded, checkpoint: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let sc = &cfg.spectra;
    let (idx, _) = eval_set(loaded, cfg.data.eval_split)?;
    let ti = pick(&idx, &[sc.sample], "spectra.sample")?[0];
    let set = subset(loaded, &[ti]);
    let op = load_op::<T>(checkpoint, &set)?;
    let spec = correction_for(cfg, true);
    let eval = evaluate(op.as_ref(), spec, &set, sc.seed_time, sc.horizon)?.remove(0);

    let (truth, pred): (Vec<Labeled>, Vec<Labeled>) = match sc.space {
        SpectrumSpace::Primitive => {
            let mut t = Vec::new();
            let mut p = Vec::new();
            for &ch in &sc.channels {
                t.push((ch.name().to_string(), spectrum_vs_time(&eval.result.truth, ch)?));
                p.push((ch.name().to_string(), spectrum_vs_time(&eval.result.predicted, ch)?));
            }
            (t, p)
        }
        SpectrumSpace::Conserved => {
            let reference = set[0].slice(sc.seed_time..sc.seed_time + sc.horizon + 1)?;
            let mut t = Vec::new();
            let mut p = Vec::new();
            for (c, name) in ConservedState::CHANNELS.iter().enumerate() {
                t.push((name.to_string(), state_spectra(&reference.states, c)?));
                p.push((name.to_string(), state_spectra(&eval.conserved.states, c)?));
            }
            (t, p)
        }
    };

    let mut spectra = Table::new(["source", "channel", "t", "k", "density"]);
    let mut cutoff = Table::new(["source", "channel", "t", "total", "overflow", "cutoff"]);
    for (source, all) in [("reference", &truth), ("prediction", &pred)] {
        for (channel, series) in all.iter() {
            for s in series {
                let t = s.t.unwrap_or(0).to_string();
                for (k, d) in s.k.iter().zip(&s.density) {
                    spectra.push(vec![source.into(), channel.clone(), t.clone(), k.to_string(), num(*d)]);
                }
                cutoff.push(vec![
                    source.into(),
                    channel.clone(),
                    t,
                    num(s.total()),
                    num(s.overflow),
                    s.cutoff(sc.cutoff_fraction).to_string(),
                ]);
            }
        }
    }
    spectra.write(&ctx.out.join("spectra.csv"))?;
    cutoff.write(&ctx.out.join("cutoff.csv"))?;
    let max_cut = |all: &[Labeled]| -> serde_json::Value {
        all.iter()
            .map(|(c, s)| (c.clone(), json!(s.iter().map(|r| r.cutoff(sc.cutoff_fraction)).max().unwrap_or(0))))
            .collect::<serde_json::Map<_, _>>()
            .into()
    };
    write_json(
        &ctx.out.join("spectra_summary.json"),
        &json!({
            "normalization": NORMALIZATION,
            "space": sc.space,
            "trajectory": ti,
            "model": enum_name(&op.config().arch),
            "operator_modes": op.config().modes,
            "cutoff_fraction": sc.cutoff_fraction,
            "reference_max_cutoff": max_cut(&truth),
            "prediction_max_cutoff": max_cut(&pred),
            "diverged_at": eval.result.diverged_at,
        }),
    )?;

    let figures = ctx.out.join("figures");
    ensure_dir(&figures)?;
    for ((channel, t_series), (_, p_series)) in truth.iter().zip(&pred) {
        let mut lines = Vec::new();
        for &step in &sc.plot_steps {
            for (label, series) in [("reference", t_series), ("prediction", p_series)] {
                if let Some(s) = series.get(step) {
                    lines.push(Series {
                        label: format!("{label} t={step}"),
                        points: s.k.iter().zip(&s.density).map(|(&k, &d)| (k as f64, d)).collect(),
                    });
                }
            }
        }
        line_chart(
            &figures.join(format!("spectrum_{channel}.svg")),
            &format!("{channel} spectrum"),
            "shell |k|",
            "density",
            &lines,
            true,
        )?;
        for (label, series) in [("reference", t_series), ("prediction", p_series)] {
            let matrix: Vec<Vec<f64>> = series.iter().map(|s| s.density.clone()).collect();
            spectrogram(
                &figures.join(format!("spectrogram_{label}_{channel}.svg")),
                &format!("{channel} {label}"),
                &matrix,
            )?;
        }
    }
    Ok(())
}
