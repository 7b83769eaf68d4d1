//! Floating-point abstraction shared by the policy and metrics math.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Real scalar used by the cost model and the statistics (`f32` or `f64`).
pub trait Scalar: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in every Scalar")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in every Scalar")
    }
}

impl<T> Scalar for T where T: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {}
