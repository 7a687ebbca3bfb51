//! Dataset generation: many trajectories from one system description,
//! with optional parameter priors and deterministic per-trajectory seeds.

use super::{
    counterfactual_base, simulate_callcenter, simulate_counterfactual, simulate_gg1, simulate_mmn,
    simulate_mt_mn, simulate_threenode, CallCenterConfig, Dist, MmnConfig, MtMnConfig,
    PolicyParams, PriorConfig, SimError, ThreeNodeConfig, THREE_NODE_NETWORKS,
};
use crate::events::{EventSchema, Trajectory};
use crate::rng::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Sampling ranges for counterfactual policies: `c` uniform over a union
/// of intervals, `n_servers` uniform over an integer range (inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyPrior {
    pub c_intervals: Vec<[f64; 2]>,
    pub n_range: [usize; 2],
}

impl Default for PolicyPrior {
    fn default() -> Self {
        Self {
            c_intervals: vec![[-5.0, -1.0], [5.0, 8.0]],
            n_range: [2, 20],
        }
    }
}

impl PolicyPrior {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.c_intervals.is_empty() || self.c_intervals.iter().any(|iv| !(iv[0] <= iv[1])) {
            return Err(SimError::InvalidConfig("bad c intervals".into()));
        }
        if self.n_range[0] == 0 || self.n_range[0] > self.n_range[1] {
            return Err(SimError::InvalidConfig("bad n range".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut SplitMix64) -> PolicyParams {
        // Interval chosen proportionally to its length, degenerate
        // intervals get equal weight.
        let lens: Vec<f64> = self
            .c_intervals
            .iter()
            .map(|iv| (iv[1] - iv[0]).max(f64::MIN_POSITIVE))
            .collect();
        let iv = self.c_intervals[rng.categorical(&lens)];
        let c = rng.uniform(iv[0], iv[1]);
        let n_servers = self.n_range[0] + rng.below(self.n_range[1] - self.n_range[0] + 1);
        PolicyParams { c, n_servers }
    }
}

/// Versioned, tagged description of a simulated system; this is the
/// `"system"` object of simulation config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Mmn(MmnConfig),
    Gg1 { interarrival: Dist, service: Dist },
    MtMn(MtMnConfig),
    CallCenter(CallCenterConfig),
    Counterfactual {
        #[serde(default = "counterfactual_base")]
        base: MtMnConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy: Option<PolicyParams>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy_prior: Option<PolicyPrior>,
    },
    ThreeNode {
        #[serde(default)]
        config: ThreeNodeConfig,
        /// Fixed network id 1..=4, or absent to draw one uniformly per
        /// trajectory.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        network: Option<usize>,
    },
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        match self {
            SystemConfig::Mmn(cfg) => cfg.validate(),
            SystemConfig::Gg1 {
                interarrival,
                service,
            } => {
                interarrival.validate()?;
                service.validate()
            }
            SystemConfig::MtMn(cfg) => cfg.validate(),
            SystemConfig::CallCenter(cfg) => cfg.validate(),
            SystemConfig::Counterfactual {
                base,
                policy,
                policy_prior,
            } => {
                base.validate()?;
                if policy.is_none() && policy_prior.is_none() {
                    return Err(SimError::InvalidConfig(
                        "counterfactual needs a policy or a policy prior".into(),
                    ));
                }
                if let Some(p) = policy_prior {
                    p.validate()?;
                }
                Ok(())
            }
            SystemConfig::ThreeNode { config, network } => {
                config.validate()?;
                match network {
                    Some(id) if !THREE_NODE_NETWORKS.contains(id) => {
                        Err(SimError::UnknownNetwork(*id))
                    }
                    _ => Ok(()),
                }
            }
        }
    }

    /// Event schema shared by all trajectories of this system.
    pub fn schema(&self) -> EventSchema {
        match self {
            SystemConfig::Mmn(cfg) => cfg.schema(),
            SystemConfig::Gg1 { .. } => MmnConfig::mm1(1.0, 1.0).schema(),
            SystemConfig::MtMn(cfg) => cfg.schema(),
            SystemConfig::CallCenter(cfg) => cfg.schema(),
            SystemConfig::Counterfactual { base, policy, .. } => {
                let mut cfg = base.clone();
                // With a sampled policy the server count varies per
                // trajectory; size the schema for the fixed case only.
                if let Some(p) = policy {
                    cfg.n_servers = p.n_servers;
                }
                cfg.schema()
            }
            SystemConfig::ThreeNode { .. } => super::three_node_schema(),
        }
    }

    fn simulate_one(
        &self,
        n_events: usize,
        prior: Option<&PriorConfig>,
        seed: u64,
    ) -> Result<Trajectory, SimError> {
        let mut rng = SplitMix64::new(seed);
        match self {
            SystemConfig::Mmn(cfg) => {
                let mut cfg = cfg.clone();
                if let Some(prior) = prior {
                    if cfg.num_classes() != 1 {
                        return Err(SimError::InvalidConfig(
                            "parameter priors require a single-class M/M/n system".into(),
                        ));
                    }
                    let (lambda, nu) = prior.sample(&mut rng);
                    cfg.lambdas[0] = lambda;
                    cfg.nus[0] = nu;
                }
                simulate_mmn(&cfg, n_events, rng.next_u64())
            }
            SystemConfig::Gg1 {
                interarrival,
                service,
            } => simulate_gg1(interarrival, service, n_events, rng.next_u64()),
            SystemConfig::MtMn(cfg) => simulate_mt_mn(cfg, n_events, rng.next_u64()),
            SystemConfig::CallCenter(cfg) => simulate_callcenter(cfg, n_events, rng.next_u64()),
            SystemConfig::Counterfactual {
                base,
                policy,
                policy_prior,
            } => {
                let policy = match (policy, policy_prior) {
                    (Some(p), _) => *p,
                    (None, Some(prior)) => prior.sample(&mut rng),
                    (None, None) => unreachable!("validated"),
                };
                simulate_counterfactual(&policy, base, n_events, rng.next_u64())
            }
            SystemConfig::ThreeNode { config, network } => {
                let id = network
                    .unwrap_or_else(|| THREE_NODE_NETWORKS[rng.below(THREE_NODE_NETWORKS.len())]);
                simulate_threenode(id, config, n_events, rng.next_u64())
            }
        }
    }
}

/// Generate `k` trajectories of `n_events` each. Child seeds are split
/// deterministically from the master seed, so the output is independent
/// of thread count and identical across runs.
pub fn sample_dataset(
    system: &SystemConfig,
    prior: Option<&PriorConfig>,
    k: usize,
    n_events: usize,
    master_seed: u64,
) -> Result<Vec<Trajectory>, SimError> {
    system.validate()?;
    if let Some(p) = prior {
        p.validate()?;
        if !matches!(system, SystemConfig::Mmn(cfg) if cfg.num_classes() == 1) {
            return Err(SimError::InvalidConfig(
                "parameter priors require a single-class M/M/n system".into(),
            ));
        }
    }
    (0..k)
        .into_par_iter()
        .map(|j| {
            let child = SplitMix64::stream(master_seed, j as u64);
            // The child generator's state is itself the trajectory seed.
            let mut traj = system.simulate_one(n_events, prior, child_seed(child))?;
            traj.meta.insert("trajectory_index".into(), j.into());
            Ok(traj)
        })
        .collect()
}

fn child_seed(mut rng: SplitMix64) -> u64 {
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm1_system() -> SystemConfig {
        SystemConfig::Mmn(MmnConfig::mm1(2.0, 4.0))
    }

    #[test]
    fn no_prior_keeps_parameters_fixed() {
        let data = sample_dataset(&mm1_system(), None, 5, 50, 1).unwrap();
        for traj in &data {
            assert_eq!(traj.meta["lambdas"], serde_json::json!([2.0]));
            assert_eq!(traj.meta["nus"], serde_json::json!([4.0]));
        }
    }

    #[test]
    fn prior_draws_land_near_box_center() {
        let prior = PriorConfig {
            lambda_range: [1.5, 2.5],
            nu_range: [3.0, 6.0],
        };
        let data = sample_dataset(&mm1_system(), Some(&prior), 10_000, 1, 2).unwrap();
        let mean_lambda: f64 = data
            .iter()
            .map(|t| t.meta["lambdas"][0].as_f64().unwrap())
            .sum::<f64>()
            / data.len() as f64;
        assert!((mean_lambda - 2.0).abs() < 0.02, "mean lambda {mean_lambda}");
    }

    #[test]
    fn disjoint_seeds_give_distinct_trajectories() {
        let data = sample_dataset(&mm1_system(), None, 4, 100, 3).unwrap();
        for i in 0..data.len() {
            for j in (i + 1)..data.len() {
                assert_ne!(data[i].records, data[j].records);
            }
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let a = sample_dataset(&mm1_system(), None, 8, 64, 9).unwrap();
        let b = sample_dataset(&mm1_system(), None, 8, 64, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixed_three_node_datasets_record_network_ids() {
        let system = SystemConfig::ThreeNode {
            config: ThreeNodeConfig::default(),
            network: None,
        };
        let data = sample_dataset(&system, None, 40, 30, 11).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for traj in &data {
            seen.insert(traj.meta["network_id"].as_u64().unwrap());
        }
        assert_eq!(seen.len(), 4, "all four networks sampled: {seen:?}");
    }

    #[test]
    fn prior_rejected_for_multiclass() {
        let system = SystemConfig::Mmn(MmnConfig {
            lambdas: vec![1.0, 2.0],
            nus: vec![3.0, 3.0],
            n_servers: 2,
            discipline: super::super::MmnDiscipline::Fifo,
        });
        let prior = PriorConfig {
            lambda_range: [1.0, 2.0],
            nu_range: [3.0, 4.0],
        };
        assert!(sample_dataset(&system, Some(&prior), 1, 10, 0).is_err());
    }
}
