//! The TOML configuration file shared by the CLI and the bindings.
//!
//! ```toml
//! [app]
//! name = "jacobi_solver"
//! seed = 42
//!
//! [run]
//! workers = 4
//! supersteps = 20
//! checkpoint_dir = "ckpt"
//!
//! [policy]
//! strategy = "every_k:1"
//!
//! [[faults]]
//! worker = 2
//! at_superstep = 5
//! kind = "fail_stop"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! Overrides of the form `section.key=value` are applied to the parsed table
//! before validation, so an override naming an unknown key is an error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::apps::AppSpec;
use crate::detector::{DetectorConfig, TerminationSignal};
use crate::harness::{FaultKind, FaultPlan, Injection, RunConfig, Trigger, WorkerMode};
use crate::policy::{CheckpointStrategy, CostModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ConfigError {
    pub fn name(&self) -> &'static str {
        "ConfigError"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerModeName {
    #[default]
    Process,
    InProcess,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_workers")]
    pub workers: u32,
    #[serde(default = "default_supersteps")]
    pub supersteps: u64,
    #[serde(default = "default_checkpoint_dir")]
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub local_checkpointing: bool,
    #[serde(default)]
    pub retention: Option<usize>,
    #[serde(default)]
    pub worker_mode: WorkerModeName,
    #[serde(default)]
    pub cold_restart: bool,
    /// Repetitions per variant for `bench`.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

fn default_workers() -> u32 {
    4
}
fn default_supersteps() -> u64 {
    20
}
fn default_checkpoint_dir() -> PathBuf {
    PathBuf::from("checkpoints")
}
fn default_repetitions() -> usize {
    10
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            workers: default_workers(),
            supersteps: default_supersteps(),
            checkpoint_dir: default_checkpoint_dir(),
            local_checkpointing: false,
            retention: None,
            worker_mode: WorkerModeName::default(),
            cold_restart: false,
            repetitions: default_repetitions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    #[serde(default = "default_strategy")]
    pub strategy: String,
    pub mu: Option<f64>,
    pub downtime: Option<f64>,
    pub recovery: Option<f64>,
    pub ckpt_cost: Option<f64>,
}

fn default_strategy() -> String {
    "every_k:1".to_owned()
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            strategy: default_strategy(),
            mu: None,
            downtime: None,
            recovery: None,
            ckpt_cost: None,
        }
    }
}

impl PolicySection {
    pub fn cost_model(&self) -> Result<Option<CostModel<f64>>, ConfigError> {
        match (self.mu, self.downtime, self.recovery, self.ckpt_cost) {
            (None, None, None, None) => Ok(None),
            (Some(mu), Some(d), Some(r), Some(c)) => Ok(Some(CostModel::new(mu, d, r, c))),
            _ => Err(ConfigError::Invalid(
                "policy.mu, policy.downtime, policy.recovery and policy.ckpt_cost must be given together".into(),
            )),
        }
    }

    pub fn strategy(&self) -> Result<CheckpointStrategy<f64>, ConfigError> {
        let strategy = CheckpointStrategy::parse(&self.strategy, self.cost_model()?)
            .map_err(|e| ConfigError::Invalid(format!("policy.strategy: {e}")))?;
        strategy
            .resolve()
            .map_err(|e| ConfigError::Invalid(format!("policy: {e}")))?;
        Ok(strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default = "default_period")]
    pub period_ms: u64,
    #[serde(default = "default_misses")]
    pub misses_k: u32,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_signal")]
    pub termination_signal: String,
}

fn default_period() -> u64 {
    DetectorConfig::default().period_ms
}
fn default_misses() -> u32 {
    DetectorConfig::default().misses_k
}
fn default_listen() -> String {
    DetectorConfig::default().listen
}
fn default_signal() -> String {
    "TERM".to_owned()
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            period_ms: default_period(),
            misses_k: default_misses(),
            listen: default_listen(),
            termination_signal: default_signal(),
        }
    }
}

impl DetectorSection {
    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            period_ms: self.period_ms,
            misses_k: self.misses_k,
            listen: self.listen.clone(),
        }
    }

    pub fn signal(&self) -> Result<TerminationSignal, ConfigError> {
        self.termination_signal
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("detector.termination_signal: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKindName {
    FailStop,
    TerminationNotice,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEntry {
    #[serde(default)]
    pub worker: u32,
    pub at_superstep: Option<u64>,
    pub at_elapsed_ms: Option<u64>,
    pub kind: FaultKindName,
}

impl FaultEntry {
    fn injection(&self) -> Result<Injection, ConfigError> {
        let trigger = match (self.at_superstep, self.at_elapsed_ms) {
            (Some(n), None) => Trigger::AtSuperstep(n),
            (None, Some(ms)) => Trigger::AtElapsedMs(ms),
            _ => {
                return Err(ConfigError::Invalid(
                    "each fault needs exactly one of at_superstep and at_elapsed_ms".into(),
                ))
            }
        };
        let kind = match self.kind {
            FaultKindName::FailStop => FaultKind::FailStop,
            FaultKindName::TerminationNotice => FaultKind::TerminationNotice,
        };
        Ok(Injection {
            worker: self.worker,
            trigger,
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Where `run`, `resume` and `bench` append run records (CSV or JSON by extension).
    pub records: Option<PathBuf>,
}

/// A parsed configuration file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub app: AppSpec,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub faults: Vec<FaultEntry>,
    #[serde(default)]
    pub output: OutputSection,
}

impl Config {
    /// Reads `path`, applies `overrides` and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::parse_with(&text, overrides).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with(text, &[])
    }

    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: PathBuf::from("<text>"),
            message,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.run.checkpoint_dir.is_relative() {
            self.run.checkpoint_dir = base.join(&self.run.checkpoint_dir);
        }
        if let Some(r) = self.output.records.as_mut() {
            if r.is_relative() {
                *r = base.join(&*r);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.app
            .build()
            .map_err(|e| ConfigError::Invalid(format!("app: {e}")))?;
        self.policy.strategy()?;
        self.detector.signal()?;
        if self.run.repetitions == 0 {
            return Err(ConfigError::Invalid("run.repetitions must be positive".into()));
        }
        self.run_config(WorkerMode::InProcess)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.fault_plan()?
            .validate(self.run.workers)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Harness settings. `process` is the worker launcher used when
    /// `run.worker_mode` is `"process"`.
    pub fn run_config(&self, process: WorkerMode) -> RunConfig {
        RunConfig {
            workers: self.run.workers,
            supersteps: self.run.supersteps,
            strategy: self.policy.strategy().unwrap_or(CheckpointStrategy::Never),
            detector: self.detector.detector(),
            checkpoint_dir: self.run.checkpoint_dir.clone(),
            local_checkpointing: self.run.local_checkpointing,
            retention: self.run.retention,
            worker_mode: match self.run.worker_mode {
                WorkerModeName::Process => process,
                WorkerModeName::InProcess => WorkerMode::InProcess,
            },
        }
    }

    pub fn fault_plan(&self) -> Result<FaultPlan, ConfigError> {
        Ok(FaultPlan {
            injections: self
                .faults
                .iter()
                .map(FaultEntry::injection)
                .collect::<Result<_, _>>()?,
            cold_restart: self.run.cold_restart,
        })
    }
}

/// Sets `section.key` (any depth) in `table` from a `key=value` string. The
/// value is read as a TOML value, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(item.to_owned());
    let (key, raw) = item.split_once('=').ok_or_else(bad)?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cursor = table;
    for part in parents {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(bad)?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
