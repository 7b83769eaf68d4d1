//! When to checkpoint.
//!
//! The optimal period under the first-order cost model is
//! `sqrt(2 * (mtbf - (downtime + recovery)) * checkpoint_cost)`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::clock::NANOS_PER_SEC;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("mean time between failures {mu} s does not exceed downtime + recovery = {unavailable} s")]
    MtbfTooSmall { mu: f64, unavailable: f64 },
    #[error("cost model field {0} must be finite and non-negative (mu must be positive)")]
    InvalidCost(&'static str),
    #[error("invalid strategy {0:?}; expected every_k:<k>, interval:<seconds>, young_daly or never")]
    BadStrategy(String),
}

/// Failure and checkpoint costs, all in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel<F> {
    /// Mean time between failures.
    pub mu_s: F,
    pub downtime_s: F,
    pub recovery_s: F,
    pub checkpoint_cost_s: F,
}

impl<F: Scalar> CostModel<F> {
    pub fn new(mu_s: F, downtime_s: F, recovery_s: F, checkpoint_cost_s: F) -> Self {
        CostModel {
            mu_s,
            downtime_s,
            recovery_s,
            checkpoint_cost_s,
        }
    }

    fn validate(&self) -> Result<(), PolicyError> {
        let ok = |v: F| v.is_finite() && v >= F::zero();
        if !ok(self.mu_s) || self.mu_s <= F::zero() {
            return Err(PolicyError::InvalidCost("mu"));
        }
        if !ok(self.downtime_s) {
            return Err(PolicyError::InvalidCost("downtime"));
        }
        if !ok(self.recovery_s) {
            return Err(PolicyError::InvalidCost("recovery"));
        }
        if !ok(self.checkpoint_cost_s) {
            return Err(PolicyError::InvalidCost("ckpt_cost"));
        }
        Ok(())
    }
}

/// Optimal checkpoint period in seconds. Zero at the boundary `mu = D + R`.
pub fn young_daly_interval<F: Scalar>(model: &CostModel<F>) -> Result<F, PolicyError> {
    model.validate()?;
    let unavailable = model.downtime_s + model.recovery_s;
    if model.mu_s < unavailable {
        return Err(PolicyError::MtbfTooSmall {
            mu: model.mu_s.to_f64().unwrap_or(f64::NAN),
            unavailable: unavailable.to_f64().unwrap_or(f64::NAN),
        });
    }
    let two = F::one() + F::one();
    Ok((two * (model.mu_s - unavailable) * model.checkpoint_cost_s).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CheckpointStrategy<F> {
    EveryKSupersteps(u64),
    TimeInterval(F),
    YoungDaly(CostModel<F>),
    Never,
}

impl<F: Scalar> CheckpointStrategy<F> {
    /// Replaces `YoungDaly` by the `TimeInterval` it stands for and checks parameters.
    pub fn resolve(self) -> Result<Self, PolicyError> {
        match self {
            CheckpointStrategy::YoungDaly(m) => {
                Ok(CheckpointStrategy::TimeInterval(young_daly_interval(&m)?))
            }
            CheckpointStrategy::EveryKSupersteps(0) => {
                Err(PolicyError::BadStrategy("every_k:0".into()))
            }
            CheckpointStrategy::TimeInterval(s) if !(s.is_finite() && s >= F::zero()) => {
                Err(PolicyError::BadStrategy(format!("interval:{s}")))
            }
            other => Ok(other),
        }
    }

    pub fn is_never(&self) -> bool {
        matches!(self, CheckpointStrategy::Never)
    }

    /// Parses the config syntax; `young_daly` takes its costs from `model`.
    pub fn parse(text: &str, model: Option<CostModel<F>>) -> Result<Self, PolicyError> {
        let bad = || PolicyError::BadStrategy(text.to_owned());
        let t = text.trim();
        if t == "never" {
            return Ok(CheckpointStrategy::Never);
        }
        if t == "young_daly" {
            return model.map(CheckpointStrategy::YoungDaly).ok_or_else(bad);
        }
        if let Some(k) = t.strip_prefix("every_k:") {
            let k: u64 = k.trim().parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(bad());
            }
            return Ok(CheckpointStrategy::EveryKSupersteps(k));
        }
        if let Some(s) = t.strip_prefix("interval:") {
            let s: f64 = s.trim().parse().map_err(|_| bad())?;
            if !(s.is_finite() && s > 0.0) {
                return Err(bad());
            }
            return F::from_f64(s)
                .map(CheckpointStrategy::TimeInterval)
                .ok_or_else(bad);
        }
        Err(bad())
    }
}

impl<F: Scalar> fmt::Display for CheckpointStrategy<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointStrategy::EveryKSupersteps(k) => write!(f, "every_k:{k}"),
            CheckpointStrategy::TimeInterval(s) => write!(f, "interval:{s}"),
            CheckpointStrategy::YoungDaly(_) => f.write_str("young_daly"),
            CheckpointStrategy::Never => f.write_str("never"),
        }
    }
}

impl<F: Scalar> FromStr for CheckpointStrategy<F> {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, None)
    }
}

/// Decides whether to checkpoint at the end of `superstep` (1-based; 0 is the initial state).
pub fn should_checkpoint<F: Scalar>(
    strategy: &CheckpointStrategy<F>,
    superstep: u64,
    now_ns: u64,
    last_checkpoint_ns: u64,
) -> bool {
    match strategy {
        CheckpointStrategy::EveryKSupersteps(k) => *k > 0 && superstep > 0 && superstep % k == 0,
        CheckpointStrategy::TimeInterval(secs) => {
            let elapsed = now_ns.saturating_sub(last_checkpoint_ns);
            let whole = F::from_u64(elapsed / NANOS_PER_SEC).unwrap_or_else(F::infinity);
            let frac = F::from_u64(elapsed % NANOS_PER_SEC).unwrap_or_else(F::zero)
                / F::lit(NANOS_PER_SEC as f64);
            whole + frac >= *secs
        }
        CheckpointStrategy::YoungDaly(model) => young_daly_interval(model)
            .map(|t| {
                should_checkpoint(
                    &CheckpointStrategy::TimeInterval(t),
                    superstep,
                    now_ns,
                    last_checkpoint_ns,
                )
            })
            .unwrap_or(false),
        CheckpointStrategy::Never => false,
    }
}
