use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conserve_core::{Error, Precision};

mod commands;
mod config;
mod output;
mod plots;

use commands::{Ctx, EvalArgs};
use config::{Device, Overrides, RunConfig};

/// Conservation-corrected neural operators for compressible flow.
#[derive(Parser)]
#[command(name = "conserve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// single or double.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long, value_enum)]
    device: Option<Device>,
}

#[derive(Args)]
struct Source {
    /// Dataset directory written by gen-data (overrides data.dir).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve reference trajectories or import PDEBench data.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a step operator with the multi-step rollout loss.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Score autoregressive rollouts on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        /// Roll out without the conservation correction.
        #[arg(long)]
        no_correction: bool,
    },
    /// Corrected and uncorrected rollouts with drift tables and figures.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Radial spectra and spectral cutoffs of a rollout.
    Spectra {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

fn context(c: &Common) -> Result<Ctx, Error> {
    let overrides = Overrides {
        seed: c.seed,
        precision: c.precision,
        device: c.device,
    };
    let cfg = RunConfig::load(c.config.as_deref())?.resolve(&overrides)?;
    Ok(Ctx {
        cfg,
        out: c.out.clone(),
        precision_flag: c.precision,
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(context(&common)?),
        Command::Train { common, source } => commands::train_cmd(context(&common)?, source.data.as_deref()),
        Command::Eval {
            common,
            source,
            checkpoint,
            horizon,
            no_correction,
        } => commands::eval_cmd(
            context(&common)?,
            EvalArgs {
                checkpoint: &checkpoint,
                data: source.data.as_deref(),
                horizon,
                no_correction,
            },
        ),
        Command::Rollout {
            common,
            source,
            checkpoint,
            horizon,
        } => commands::rollout_cmd(context(&common)?, &checkpoint, source.data.as_deref(), horizon),
        Command::Spectra {
            common,
            source,
            checkpoint,
            horizon,
        } => commands::spectra_cmd(context(&common)?, &checkpoint, source.data.as_deref(), horizon),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Diverged(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
