//! Weak approximation of stochastic volatility models by splitting schemes:
//! Euler–Maruyama, Ninomiya–Victoir (NV), NV with a drift shift whose flows are
//! all closed-form, and a Girsanov-weighted NV variant. Expectations are
//! computed by quasi Monte Carlo on a Sobol sequence.

pub mod drift;
pub mod experiments;
pub mod error;
pub mod flows;
pub mod models;
pub mod ode;
pub mod pricing;
pub mod qmc;
pub mod schemes;

pub use error::{Error, Result};

/// Counters collected while simulating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostics {
    /// Numeric ODE solves requested by flows without a closed form.
    pub oracle_calls: u64,
    /// Times a positive-part clamp in a flow formula was active.
    pub clamp_hits: u64,
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.oracle_calls += other.oracle_calls;
        self.clamp_hits += other.clamp_hits;
    }
}
