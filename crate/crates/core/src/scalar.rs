//! Scalar abstraction for the objective and game math.
//!
//! Everything that computes latency, cost, risk or potential values is
//! generic over [`Scalar`]. The simulator itself instantiates `f64`; `f32`
//! is supported for the math kernel and exercised in tests.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + FromPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Absolute tolerance used when comparing two routes to the same value.
    const TOLERANCE: f64;

    /// Converts an `f64` literal or config value into this scalar.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    const TOLERANCE: f64 = 1e-9;
}

impl Scalar for f32 {
    const TOLERANCE: f64 = 1e-3;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25).as_f64(), 0.25);
    }
}
