//! Seedable discrete-event simulators producing ground-truth event tables.
//!
//! Every simulator here drives its state exclusively through
//! [`EventSchema::apply`](crate::events::EventSchema::apply), so emitted
//! trajectories replay bit-for-bit; the simulator's own job is reduced to
//! sampling *when* the next event happens and *which* one it is.
//! Randomness comes from [`SplitMix64`](crate::rng::SplitMix64) streams
//! split deterministically from a master seed, which makes every output a
//! pure function of `(config, n_events, seed)`.

mod callcenter;
mod dataset;
mod gg1;
mod markov;
mod mtmn;

pub use callcenter::{simulate_callcenter, CallCenterConfig};
pub use dataset::{sample_dataset, PolicyPrior, SystemConfig};
pub use gg1::simulate_gg1;
pub use markov::{
    permitted_events, simulate_mmn, simulate_mmn_from, simulate_threenode, three_node_schema,
    MmnConfig, MmnDiscipline, ThreeNodeConfig, NUM_THREE_NODE_EVENTS, THREE_NODE_NETWORKS,
};
pub use mtmn::{counterfactual_base, simulate_counterfactual, simulate_mt_mn, MtMnConfig};

use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown network id {0} (expected 1..=4)")]
    UnknownNetwork(usize),
}

/// Sampling distribution for inter-arrival or service times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Exponential { rate: f64 },
    Uniform { a: f64, b: f64 },
    /// Resamples uniformly from a fixed set of observed values.
    Empirical { samples: Vec<f64> },
    Deterministic { v: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        match self {
            Dist::Exponential { rate } if !(*rate > 0.0) => bad(format!("rate {rate}")),
            Dist::Uniform { a, b } if !(a < b) => bad(format!("uniform bounds [{a}, {b})")),
            Dist::Empirical { samples }
                if samples.is_empty() || samples.iter().any(|&s| s < 0.0 || !s.is_finite()) =>
            {
                bad("empirical samples must be nonempty and nonnegative".into())
            }
            Dist::Deterministic { v } if !(*v >= 0.0) => bad(format!("deterministic value {v}")),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> f64 {
        match self {
            Dist::Exponential { rate } => rng.exponential(*rate),
            Dist::Uniform { a, b } => rng.uniform(*a, *b),
            Dist::Empirical { samples } => samples[rng.below(samples.len())],
            Dist::Deterministic { v } => *v,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Dist::Exponential { rate } => 1.0 / rate,
            Dist::Uniform { a, b } => 0.5 * (a + b),
            Dist::Empirical { samples } => {
                samples.iter().sum::<f64>() / samples.len() as f64
            }
            Dist::Deterministic { v } => *v,
        }
    }
}

/// Uniform, independent box prior over M/M/1 arrival and service rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub lambda_range: [f64; 2],
    pub nu_range: [f64; 2],
}

impl PriorConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        for r in [self.lambda_range, self.nu_range] {
            if !(r[0] > 0.0 && r[0] < r[1]) {
                return Err(SimError::InvalidConfig(format!(
                    "prior range [{}, {}]",
                    r[0], r[1]
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> (f64, f64) {
        let lambda = rng.uniform(self.lambda_range[0], self.lambda_range[1]);
        let nu = rng.uniform(self.nu_range[0], self.nu_range[1]);
        (lambda, nu)
    }
}

/// Staffing policy for counterfactual simulation: a day-level arrival
/// rate shift `c` and a server count `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub c: f64,
    pub n_servers: usize,
}
