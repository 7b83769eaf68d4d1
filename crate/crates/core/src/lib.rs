//! Application-level fault tolerance for iterative bulk-synchronous-parallel programs.

pub mod apps;
pub mod clock;
pub mod config;
pub mod detector;
pub mod harness;
pub mod metrics;
pub mod policy;
pub mod registry;
pub mod scalar;
pub mod session;
pub mod store;

pub use scalar::Scalar;

pub type CostModel = policy::CostModel<f64>;
pub type CostModel32 = policy::CostModel<f32>;
pub type CheckpointStrategy = policy::CheckpointStrategy<f64>;
pub type CheckpointStrategy32 = policy::CheckpointStrategy<f32>;
pub type OverheadReport = metrics::OverheadReport<f64>;
pub type OverheadReport32 = metrics::OverheadReport<f32>;
pub type BoxSummary = metrics::BoxSummary<f64>;
