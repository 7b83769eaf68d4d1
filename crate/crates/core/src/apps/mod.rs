//! Deterministic iterative applications driven by the BSP harness.
//!
//! Each application splits its work into contiguous index blocks, one per
//! worker. A superstep maps `(global, local)` to a new local state and a
//! contribution; the coordinator folds contributions in worker-id order.
//! Random draws come from a ChaCha stream keyed by `(seed, item, superstep)`,
//! so results do not depend on how items are partitioned.

mod bytes;
pub mod evolution;
pub mod jacobi;
pub mod swarm;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use evolution::DifferentialEvolution;
pub use jacobi::JacobiSolver;
pub use swarm::ParticleSwarm;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppError {
    #[error("invalid application parameters: {0}")]
    Invalid(String),
    #[error("malformed {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },
}

impl AppError {
    pub(crate) fn corrupt(what: &'static str, detail: impl Into<String>) -> Self {
        AppError::Corrupt {
            what,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    ParticleSwarm,
    DifferentialEvolution,
    #[serde(alias = "jacobi")]
    JacobiSolver,
}

impl AppKind {
    pub const ALL: [AppKind; 3] = [
        AppKind::ParticleSwarm,
        AppKind::DifferentialEvolution,
        AppKind::JacobiSolver,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AppKind::ParticleSwarm => "particle_swarm",
            AppKind::DifferentialEvolution => "differential_evolution",
            AppKind::JacobiSolver => "jacobi_solver",
        }
    }
}

impl fmt::Display for AppKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AppKind {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "particle_swarm" => Ok(AppKind::ParticleSwarm),
            "differential_evolution" => Ok(AppKind::DifferentialEvolution),
            "jacobi_solver" | "jacobi" => Ok(AppKind::JacobiSolver),
            other => Err(AppError::Invalid(format!("unknown application {other:?}"))),
        }
    }
}

/// Which application to run and at what size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: AppKind,
    /// Search-space dimension (swarm, evolution) or grid rows (Jacobi).
    #[serde(default = "default_dimension")]
    pub dimension: u32,
    /// Population size (swarm, evolution) or grid columns (Jacobi).
    #[serde(default = "default_population", alias = "population_or_grid")]
    pub population: u32,
    #[serde(default)]
    pub seed: u64,
}

fn default_dimension() -> u32 {
    16
}

fn default_population() -> u32 {
    50
}

impl AppSpec {
    pub fn new(name: AppKind, dimension: u32, population: u32, seed: u64) -> Self {
        AppSpec {
            name,
            dimension,
            population,
            seed,
        }
    }

    /// Desk-scale defaults: dimension 16, population/grid 50.
    pub fn desk(name: AppKind, seed: u64) -> Self {
        Self::new(name, default_dimension(), default_population(), seed)
    }

    pub fn build(&self) -> Result<Box<dyn BspApp>, AppError> {
        if self.dimension == 0 || self.population == 0 {
            return Err(AppError::Invalid(
                "dimension and population must be positive".into(),
            ));
        }
        Ok(match self.name {
            AppKind::JacobiSolver => Box::new(JacobiSolver::new(*self)),
            AppKind::ParticleSwarm => Box::new(ParticleSwarm::new(*self)),
            AppKind::DifferentialEvolution => Box::new(DifferentialEvolution::new(*self)?),
        })
    }
}

/// Result of one worker's superstep.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutput {
    pub local: Vec<u8>,
    pub contribution: Vec<u8>,
}

/// An iterative application split over `workers` BSP workers.
///
/// Implementations must be bit-deterministic: no wall-clock, address or
/// thread-order dependent values.
pub trait BspApp: Send + Sync {
    fn spec(&self) -> AppSpec;

    fn init_global(&self) -> Vec<u8>;

    fn init_local(&self, worker: u32, workers: u32) -> Vec<u8>;

    /// Computes superstep `superstep` (1-based) for one worker.
    fn superstep(
        &self,
        global: &[u8],
        local: &[u8],
        worker: u32,
        workers: u32,
        superstep: u64,
    ) -> Result<StepOutput, AppError>;

    /// Folds contributions, indexed by worker id, into the next global state.
    fn reduce(&self, global: &[u8], contributions: &[Vec<u8>]) -> Result<Vec<u8>, AppError>;

    /// Reconstructs a worker's local state after `superstep` completed
    /// supersteps, for recoveries without local checkpoints.
    fn rebuild_local(
        &self,
        global: &[u8],
        worker: u32,
        workers: u32,
        superstep: u64,
    ) -> Result<Vec<u8>, AppError>;
}

/// Contiguous share of `items` owned by `worker`; the first `items % workers`
/// workers get one extra item.
pub fn block(worker: u32, workers: u32, items: usize) -> Range<usize> {
    let workers = workers.max(1) as usize;
    let w = worker as usize;
    let base = items / workers;
    let extra = items % workers;
    let start = w * base + w.min(extra);
    let len = base + usize::from(w < extra);
    start..(start + len).min(items)
}

/// Deterministic random stream for `item` at `superstep`.
pub fn stream_rng(seed: u64, item: u64, superstep: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&item.to_le_bytes());
    key[16..24].copy_from_slice(&superstep.to_le_bytes());
    key[24..32].copy_from_slice(b"bspstrm1");
    ChaCha8Rng::from_seed(key)
}

/// Rastrigin function, minimum 0 at the origin.
pub fn rastrigin(x: &[f64]) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    x.iter().fold(10.0 * x.len() as f64, |acc, &v| {
        acc + (v * v - 10.0 * (two_pi * v).cos())
    })
}

/// Search domain shared by the swarm and evolution apps.
pub const SEARCH_BOUND: f64 = 5.12;
