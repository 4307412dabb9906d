//! Run configuration: a TOML file with every key optional, plus command-line
//! overrides.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use shdempc::coordinator::{HierarchyInit, SamplingMode, TieBreak};
use shdempc::experiments::{ExperimentSpec, Variant};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: bool,
    pub plots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            csv: true,
            plots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub ns: Vec<usize>,
    /// Replaces `experiment.time_steps` for the scaling study.
    pub time_steps: usize,
    pub variants: Vec<Variant>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            ns: vec![10, 20, 40, 80],
            time_steps: 30,
            variants: vec![Variant::Parallel, Variant::Hierarchy],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

impl LogLevel {
    pub fn filter(self) -> log::LevelFilter {
        match self {
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
            LogLevel::Trace => log::LevelFilter::Trace,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub log_level: LogLevel,
    pub output: OutputConfig,
    pub scaling: ScalingConfig,
    pub experiment: ExperimentSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            log_level: LogLevel::Warn,
            output: OutputConfig::default(),
            scaling: ScalingConfig::default(),
            experiment: ExperimentSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment
            .validate()
            .map_err(|e| CliError::Config(format!("experiment: {e}")))?;
        if self.output.dir.as_os_str().is_empty() {
            return Err(CliError::Config("output.dir must not be empty".into()));
        }
        if self.scaling.ns.is_empty() || self.scaling.ns.contains(&0) {
            return Err(CliError::Config(
                "scaling.ns must be a non-empty list of positive agent counts".into(),
            ));
        }
        if self.scaling.variants.is_empty() {
            return Err(CliError::Config("scaling.variants must not be empty".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration, as written beside every output.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration is always representable as TOML")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HierarchyArg {
    AllOne,
    Universal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    PerIteration,
    PerLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TieBreakArg {
    Seeded,
    Positive,
}

/// Command-line overrides; each one replaces the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file (all keys optional).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_agents: Option<usize>,
    /// Number of hierarchy levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Negotiation iterations per phase.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub time_steps: Option<usize>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_enum)]
    pub hierarchy: Option<HierarchyArg>,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
    #[arg(long, value_enum)]
    pub tie_break: Option<TieBreakArg>,
    /// Solve the agents of one level concurrently.
    #[arg(long)]
    pub parallel: bool,
    #[arg(long)]
    pub mu_smooth: Option<f64>,
    #[arg(long)]
    pub tol_eq: Option<f64>,
    #[arg(long)]
    pub tol_grad: Option<f64>,
    /// Skip the CSV sinks.
    #[arg(long)]
    pub no_csv: bool,
    /// Also render SVG plots from the CSVs.
    #[arg(long)]
    pub plots: bool,
    #[arg(long, value_enum)]
    pub log_level: Option<LogLevel>,
}

impl Overrides {
    /// Load the base config (or defaults) and apply every override.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let e = &mut cfg.experiment;
        macro_rules! set {
            ($src:expr, $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(self.n_agents, e.n_agents);
        set!(self.levels, e.levels);
        set!(self.iterations, e.iterations);
        set!(self.horizon, e.horizon);
        set!(self.time_steps, e.time_steps);
        set!(self.seeds, e.seeds);
        set!(self.mu_smooth, e.solver.mu_smooth);
        set!(self.tol_eq, e.solver.tol_eq);
        set!(self.tol_grad, e.solver.tol_grad);
        set!(self.out, cfg.output.dir);
        set!(self.log_level, cfg.log_level);
        if let Some(h) = self.hierarchy {
            e.hierarchy_init = match h {
                HierarchyArg::AllOne => HierarchyInit::AllOne,
                HierarchyArg::Universal => HierarchyInit::Universal,
            };
        }
        if let Some(s) = self.sampling {
            e.sampling = match s {
                SamplingArg::PerIteration => SamplingMode::PerIteration,
                SamplingArg::PerLevel => SamplingMode::PerLevel,
            };
        }
        if let Some(t) = self.tie_break {
            e.tie_break = match t {
                TieBreakArg::Seeded => TieBreak::Seeded,
                TieBreakArg::Positive => TieBreak::Positive,
            };
        }
        if self.parallel {
            e.parallel = true;
        }
        if self.no_csv {
            cfg.output.csv = false;
        }
        if self.plots {
            cfg.output.plots = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
