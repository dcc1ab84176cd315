//! Run configuration: one TOML file, every section optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use conserve_core::correction::CorrectionSpec;
use conserve_core::data::{IcConfig, SolverConfig};
use conserve_core::models::OperatorConfig;
use conserve_core::spectra::SpectrumChannel;
use conserve_core::training::{EvalConfig, TrainConfig};
use conserve_core::{Error, Precision, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Auto,
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    #[default]
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeBenchSource {
    pub path: PathBuf,
    /// Half-open sample range `[start, end)`.
    pub samples: [usize; 2],
    pub downsample: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Trajectories generated by `gen-data`.
    pub trajectories: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Dataset directory read by train/eval/rollout/spectra (overridden by `--data`).
    pub dir: Option<PathBuf>,
    /// Storage precision of generated channel files.
    pub storage: Precision,
    /// Split scored by eval, rollout and spectra.
    pub eval_split: SplitName,
    /// Import from a PDEBench file instead of running the solver.
    pub pdebench: Option<PdeBenchSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            trajectories: 32,
            split: [0.8, 0.1, 0.1],
            dir: None,
            storage: Precision::Double,
            eval_split: SplitName::Test,
            pdebench: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Newest seed frame; with two-frame history the default seeds from frames 0 and 1.
    pub seed_time: usize,
    pub horizon: usize,
    /// Sample positions within the evaluation split.
    pub samples: Vec<usize>,
    pub images: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            seed_time: 1,
            horizon: 50,
            samples: vec![0],
            images: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumSpace {
    /// Derived fields (`tke`, `rho`, `p`, `u_x`, `u_y`).
    #[default]
    Primitive,
    /// Raw model-output channels (`rho`, `mom_x`, `mom_y`, `E`).
    Conserved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectraConfig {
    pub space: SpectrumSpace,
    pub channels: Vec<SpectrumChannel>,
    /// Rollout steps drawn in the spectrum figure.
    pub plot_steps: Vec<usize>,
    pub cutoff_fraction: f64,
    pub seed_time: usize,
    pub horizon: usize,
    pub sample: usize,
}

impl Default for SpectraConfig {
    fn default() -> Self {
        SpectraConfig {
            space: SpectrumSpace::Primitive,
            channels: vec![SpectrumChannel::Tke, SpectrumChannel::Rho],
            plot_steps: vec![1, 10, 50],
            cutoff_fraction: conserve_core::spectra::CUTOFF_FRACTION,
            seed_time: 1,
            horizon: 50,
            sample: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, the split and weight initialisation.
    pub seed: u64,
    /// Working precision; also copied into `training.precision`.
    pub precision: Precision,
    pub device: Device,
    pub solver: SolverConfig,
    pub ic: IcConfig,
    pub data: DataConfig,
    pub operator: OperatorConfig,
    pub training: TrainConfig,
    pub correction: CorrectionSpec,
    pub eval: EvalConfig,
    pub rollout: RolloutConfig,
    pub spectra: SpectraConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::Single,
            device: Device::Auto,
            solver: SolverConfig::default(),
            ic: IcConfig::default(),
            data: DataConfig::default(),
            operator: OperatorConfig::default(),
            training: TrainConfig::default(),
            correction: CorrectionSpec::default(),
            eval: EvalConfig::default(),
            rollout: RolloutConfig::default(),
            spectra: SpectraConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub device: Option<Device>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string() + &span_hint(text, e.span())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::parse(&text)
            }
        }
    }

    /// Applies overrides, syncs duplicated fields and validates every section.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.training.seed = seed;
        }
        if let Some(p) = o.precision {
            self.precision = p;
        }
        if let Some(d) = o.device {
            self.device = d;
        }
        self.training.precision = self.precision;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.ic.validate()?;
        self.operator.validate()?;
        self.training.validate()?;
        self.correction.validate()?;
        self.eval.validate()?;
        if self.data.trajectories == 0 {
            return Err(Error::config("data.trajectories", "must be at least 1"));
        }
        let s = self.data.split;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", "fractions must be in [0, 1] and sum to 1"));
        }
        if let Some(src) = &self.data.pdebench {
            if src.samples[1] <= src.samples[0] {
                return Err(Error::config("data.pdebench.samples", "end must exceed start"));
            }
        }
        if self.rollout.horizon == 0 || self.spectra.horizon == 0 {
            return Err(Error::config("rollout.horizon", "horizons must be at least 1"));
        }
        if !(self.spectra.cutoff_fraction > 0.0 && self.spectra.cutoff_fraction < 1.0) {
            return Err(Error::config("spectra.cutoff_fraction", "must lie in (0, 1)"));
        }
        if self.spectra.space == SpectrumSpace::Primitive && self.spectra.channels.is_empty() {
            return Err(Error::config("spectra.channels", "list at least one channel"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
