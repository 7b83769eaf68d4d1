//! BSP runtime with checkpointing, failure detection and fault injection.
//!
//! A coordinator drives `workers` workers through supersteps. After each
//! global synchronization it updates the registry, consults the checkpoint
//! strategy, and polls the termination watcher. A heartbeat timeout triggers a
//! coordinated rollback: every worker returns to the latest committed epoch and
//! the failed worker is respawned with a higher incarnation.

mod coordinator;
mod worker;

use std::io;
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::apps::{AppError, AppSpec};
use crate::detector::{DetectorConfig, TerminationWatcher};
use crate::metrics::RunRecord;
use crate::policy::{CheckpointStrategy, PolicyError};
use crate::registry::RegistryError;
use crate::store::StoreError;

pub use worker::{worker_main, WorkerMode};

/// Id of the reserved segment describing the run a checkpoint belongs to.
pub const META_SEGMENT: &str = "__meta";
/// Id of the segment holding the application's global state.
pub const GLOBAL_SEGMENT: &str = "global.state";

/// Id of worker `w`'s local-state segment.
pub fn local_segment_id(worker: u32) -> String {
    format!("local.{worker:05}")
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("worker {worker} failed at superstep {superstep} and no checkpoint is available")]
    UnrecoverableFailure { worker: u32, superstep: u64 },
    #[error("no valid checkpoint in {0}")]
    NoCheckpoint(PathBuf),
    #[error("checkpoint belongs to a different run: {0}")]
    MetaMismatch(String),
    #[error("worker {worker} reported an error: {message}")]
    Worker { worker: u32, message: String },
    #[error("worker protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl HarnessError {
    pub fn name(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "ConfigError",
            HarnessError::UnrecoverableFailure { .. } => "UnrecoverableFailure",
            HarnessError::NoCheckpoint(_) => "NoCheckpoint",
            HarnessError::MetaMismatch(_) => "MetaMismatch",
            HarnessError::Worker { .. } => "WorkerError",
            HarnessError::Protocol(_) => "ProtocolError",
            HarnessError::App(_) => "AppError",
            HarnessError::Store(e) => e.name(),
            HarnessError::Registry(e) => e.name(),
            HarnessError::Policy(_) => "PolicyError",
            HarnessError::Io(_) => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    /// When superstep `n` (1-based) starts.
    AtSuperstep(u64),
    /// Once this many milliseconds have elapsed since the run started.
    AtElapsedMs(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    FailStop,
    TerminationNotice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub worker: u32,
    pub trigger: Trigger,
    pub kind: FaultKind,
}

impl Injection {
    pub fn fail_stop(worker: u32, superstep: u64) -> Self {
        Injection {
            worker,
            trigger: Trigger::AtSuperstep(superstep),
            kind: FaultKind::FailStop,
        }
    }

    pub fn notice(superstep: u64) -> Self {
        Injection {
            worker: 0,
            trigger: Trigger::AtSuperstep(superstep),
            kind: FaultKind::TerminationNotice,
        }
    }
}

/// Failures to inject during a run. Each injection fires once; a fail-stop
/// ends the targeted incarnation, so a worker never dies twice in one life.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    pub injections: Vec<Injection>,
    /// Restart from the initial state when a worker fails before any checkpoint exists.
    pub cold_restart: bool,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(injections: Vec<Injection>) -> Self {
        FaultPlan {
            injections,
            cold_restart: false,
        }
    }

    pub fn validate(&self, workers: u32) -> Result<(), HarnessError> {
        for inj in &self.injections {
            if inj.worker >= workers {
                return Err(HarnessError::Config(format!(
                    "fault targets worker {} but only {workers} workers exist",
                    inj.worker
                )));
            }
            if inj.trigger == Trigger::AtSuperstep(0) {
                return Err(HarnessError::Config(
                    "at_superstep triggers are 1-based".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub workers: u32,
    pub supersteps: u64,
    pub strategy: CheckpointStrategy<f64>,
    pub detector: DetectorConfig,
    pub checkpoint_dir: PathBuf,
    /// Also commit each worker's local state.
    pub local_checkpointing: bool,
    /// Keep only this many newest checkpoints (at least 2); `None` keeps all.
    pub retention: Option<usize>,
    pub worker_mode: WorkerMode,
}

impl RunConfig {
    /// Desk-scale defaults: 4 workers, 20 supersteps, checkpoint every superstep,
    /// 50 ms heartbeats with k = 3, in-process workers.
    pub fn desk(checkpoint_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            workers: 4,
            supersteps: 20,
            strategy: CheckpointStrategy::EveryKSupersteps(1),
            detector: DetectorConfig::fast(),
            checkpoint_dir: checkpoint_dir.into(),
            local_checkpointing: false,
            retention: None,
            worker_mode: WorkerMode::InProcess,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.workers == 0 || self.workers > u32::from(u16::MAX) {
            return Err(HarnessError::Config(format!(
                "workers must be in 1..=65535, got {}",
                self.workers
            )));
        }
        if self.supersteps == 0 {
            return Err(HarnessError::Config("supersteps must be positive".into()));
        }
        if let Some(r) = self.retention {
            if r < 2 {
                return Err(HarnessError::Store(StoreError::RetentionTooSmall(r)));
            }
        }
        self.detector.validate().map_err(HarnessError::Config)?;
        self.strategy.resolve()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    /// Stopped by a termination notice after committing `epoch`.
    Resumable { epoch: u64 },
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub global: Vec<u8>,
    pub record: RunRecord,
    pub status: RunStatus,
    /// Epochs committed by this run, in order (rollbacks may repeat none).
    pub committed_epochs: Vec<u64>,
    /// Epochs restored after each failure.
    pub restored_epochs: Vec<u64>,
    /// Superstep being executed when each failure was detected.
    pub failed_at: Vec<u64>,
}

/// Paired records from [`bench`].
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub instrumented: Vec<RunRecord>,
    pub baseline: Vec<RunRecord>,
}

/// Text form of the reserved metadata segment.
pub fn encode_meta(app: &AppSpec, config: &RunConfig) -> Vec<u8> {
    format!(
        "app={}\ndimension={}\npopulation={}\nseed={}\nworkers={}\nsupersteps={}\n",
        app.name, app.dimension, app.population, app.seed, config.workers, config.supersteps
    )
    .into_bytes()
}

/// Checks that a checkpoint's metadata matches the app and worker count.
pub fn check_meta(stored: &[u8], app: &AppSpec, config: &RunConfig) -> Result<(), HarnessError> {
    let stored = std::str::from_utf8(stored)
        .map_err(|_| HarnessError::MetaMismatch("metadata is not UTF-8".into()))?;
    let expected = String::from_utf8(encode_meta(app, config)).expect("ascii");
    let field = |text: &str, key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
            .map(str::to_owned)
    };
    for key in ["app", "dimension", "population", "seed", "workers"] {
        let want = field(&expected, key);
        let got = field(stored, key);
        if want != got {
            return Err(HarnessError::MetaMismatch(format!(
                "{key}: checkpoint has {}, configuration has {}",
                got.as_deref().unwrap_or("nothing"),
                want.as_deref().unwrap_or("nothing"),
            )));
        }
    }
    Ok(())
}

/// Runs `app` from its initial state. The checkpoint directory must not
/// already contain checkpoints.
pub fn run(app: &AppSpec, config: &RunConfig, plan: &FaultPlan) -> Result<RunOutcome, HarnessError> {
    Harness::new(*app, config.clone()).run(plan)
}

/// Continues from the latest valid checkpoint in the configured directory.
pub fn resume(app: &AppSpec, config: &RunConfig) -> Result<RunOutcome, HarnessError> {
    Harness::new(*app, config.clone()).resume(&FaultPlan::none())
}

/// Runs the app `repetitions` times instrumented and `repetitions` times with
/// every dependability feature disabled, alternating the two.
pub fn bench(app: &AppSpec, config: &RunConfig, repetitions: usize) -> Result<BenchResult, HarnessError> {
    if repetitions == 0 {
        return Err(HarnessError::Config("repetitions must be positive".into()));
    }
    config.validate()?;
    let mut result = BenchResult {
        instrumented: Vec::with_capacity(repetitions),
        baseline: Vec::with_capacity(repetitions),
    };
    for i in 0..repetitions {
        let dir = config
            .checkpoint_dir
            .join(format!("bench-{}-{i:03}", std::process::id()));
        if dir.exists() {
            return Err(HarnessError::Config(format!(
                "bench directory {} already exists",
                dir.display()
            )));
        }
        let cfg = RunConfig {
            checkpoint_dir: dir.clone(),
            ..config.clone()
        };
        let run_instrumented = || {
            let outcome = Harness::new(*app, cfg.clone()).run(&FaultPlan::none());
            std::fs::remove_dir_all(&dir).ok();
            outcome
        };
        let run_baseline = || Harness::new(*app, cfg.clone()).baseline().run(&FaultPlan::none());
        let (mut with, mut without) = if i % 2 == 0 {
            let w = run_instrumented()?;
            (w, run_baseline()?)
        } else {
            let b = run_baseline()?;
            (run_instrumented()?, b)
        };
        with.record.run_id = format!("instrumented-{i:03}");
        without.record.run_id = format!("baseline-{i:03}");
        result.instrumented.push(with.record);
        result.baseline.push(without.record);
    }
    Ok(result)
}

/// Configurable entry point for runs and resumes.
pub struct Harness {
    app: AppSpec,
    config: RunConfig,
    watcher: Arc<TerminationWatcher>,
    instrumented: bool,
}

impl Harness {
    pub fn new(app: AppSpec, config: RunConfig) -> Self {
        Harness {
            app,
            config,
            watcher: Arc::new(TerminationWatcher::injected_only()),
            instrumented: true,
        }
    }

    /// Uses `watcher` (for example one bound to SIGTERM) for termination notices.
    pub fn with_watcher(mut self, watcher: Arc<TerminationWatcher>) -> Self {
        self.watcher = watcher;
        self
    }

    /// Disables the registry, detector, heartbeats, checkpoints and fault injection.
    pub fn baseline(mut self) -> Self {
        self.instrumented = false;
        self
    }

    pub fn run(&self, plan: &FaultPlan) -> Result<RunOutcome, HarnessError> {
        coordinator::execute(self, plan, false)
    }

    pub fn resume(&self, plan: &FaultPlan) -> Result<RunOutcome, HarnessError> {
        coordinator::execute(self, plan, true)
    }
}
