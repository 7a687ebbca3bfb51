//! Non-stationary M_t/M/n simulation and counterfactual staffing runs.

use super::{PolicyParams, SimError};
use crate::events::{EventRecord, EventSchema, Trajectory};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};

/// M_t/M/n configuration: a piecewise-constant hourly arrival-rate
/// profile (customers per hour, cycling once exhausted), exponential
/// service at rate `nu`, and `n_servers` parallel servers. `hour_len`
/// sets the length of one profile step in simulation time units, so a
/// profile in customers/hour with timestamps in minutes uses
/// `hour_len = 60`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtMnConfig {
    pub hourly_rates: Vec<f64>,
    pub nu: f64,
    pub n_servers: usize,
    #[serde(default = "default_hour_len")]
    pub hour_len: f64,
}

fn default_hour_len() -> f64 {
    1.0
}

impl MtMnConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.hourly_rates.is_empty() || self.hourly_rates.iter().any(|&r| r < 0.0) {
            return Err(SimError::InvalidConfig(
                "hourly rates must be nonnegative".into(),
            ));
        }
        if !self.hourly_rates.iter().any(|&r| r > 0.0) {
            return Err(SimError::InvalidConfig(
                "at least one hourly rate must be positive".into(),
            ));
        }
        if !(self.nu > 0.0) || self.n_servers == 0 || !(self.hour_len > 0.0) {
            return Err(SimError::InvalidConfig(
                "nu, n_servers and hour_len must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Arrival rate per unit time at absolute time `t` (profile cycles).
    pub fn rate_at(&self, t: f64) -> f64 {
        let hour = (t / self.hour_len).floor() as usize % self.hourly_rates.len();
        self.hourly_rates[hour] / self.hour_len
    }

    pub fn schema(&self) -> EventSchema {
        super::MmnConfig {
            lambdas: vec![1.0],
            nus: vec![self.nu],
            n_servers: self.n_servers,
            discipline: super::MmnDiscipline::Fifo,
        }
        .schema()
    }
}

/// Simulate an M_t/M/n queue from the empty state.
///
/// Arrivals are a non-homogeneous Poisson process realized by thinning
/// against the maximum profile rate; service completions are scheduled
/// per server with exponential durations drawn at service start.
pub fn simulate_mt_mn(
    cfg: &MtMnConfig,
    n_events: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let schema = cfg.schema();
    let initial = schema.empty_state();
    let mut state = initial.clone();
    let mut rng = SplitMix64::new(seed);

    let max_rate = cfg
        .hourly_rates
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        / cfg.hour_len;
    let mut next_arrival = thin_next(cfg, max_rate, 0.0, &mut rng);
    let mut finish: Vec<Option<f64>> = vec![None; cfg.n_servers];
    let mut now = 0.0;
    let mut records = Vec::with_capacity(n_events);

    for i in 0..n_events {
        let next_dep = finish
            .iter()
            .enumerate()
            .filter_map(|(j, f)| f.map(|t| (t, j)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let rec = match next_dep {
            Some((t_dep, j)) if t_dep <= next_arrival => {
                let rec = EventRecord {
                    dt: t_dep - now,
                    event: 1 + j,
                    class: None,
                };
                now = t_dep;
                finish[j] = None;
                rec
            }
            _ => {
                let rec = EventRecord {
                    dt: next_arrival - now,
                    event: 0,
                    class: None,
                };
                now = next_arrival;
                next_arrival = thin_next(cfg, max_rate, now, &mut rng);
                rec
            }
        };
        schema
            .apply(&mut state, i, &rec)
            .expect("simulator transitions are valid by construction");
        // Any server that became busy just started a service.
        for (j, occ) in state.nodes[0].servers.iter().enumerate() {
            if occ.is_some() && finish[j].is_none() {
                finish[j] = Some(now + rng.exponential(cfg.nu));
            }
        }
        records.push(rec);
    }

    let mut traj = Trajectory::new(initial, records);
    traj.meta.insert("generator".into(), "mt_mn".into());
    traj.meta.insert("seed".into(), seed.into());
    Ok(traj)
}

/// Next accepted arrival after `t` by thinning at `max_rate`.
fn thin_next(cfg: &MtMnConfig, max_rate: f64, mut t: f64, rng: &mut SplitMix64) -> f64 {
    loop {
        t += rng.exponential(max_rate);
        if rng.next_f64() * max_rate < cfg.rate_at(t) {
            return t;
        }
    }
}

/// The 12-hour emergency-department baseline: hourly arrivals
/// [8, 8, 8, 8, 8, 14, 15, 16, 17, 18, 19, 18] and service rate 3.5
/// patients per hour. The server count comes from the policy.
pub fn counterfactual_base() -> MtMnConfig {
    MtMnConfig {
        hourly_rates: vec![
            8.0, 8.0, 8.0, 8.0, 8.0, 14.0, 15.0, 16.0, 17.0, 18.0, 19.0, 18.0,
        ],
        nu: 3.5,
        n_servers: 1,
        hour_len: 1.0,
    }
}

/// Simulate the system under a staffing policy: hourly arrival rates
/// become `max(0, c + rate)` and the server count is `policy.n_servers`.
/// Negative shifted rates are clipped to zero (logged).
pub fn simulate_counterfactual(
    policy: &PolicyParams,
    base: &MtMnConfig,
    n_events: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    if policy.n_servers == 0 {
        return Err(SimError::InvalidConfig("policy n_servers must be >= 1".into()));
    }
    let mut cfg = base.clone();
    cfg.n_servers = policy.n_servers;
    cfg.hourly_rates = base
        .hourly_rates
        .iter()
        .map(|&r| {
            let shifted = r + policy.c;
            if shifted < 0.0 {
                log::warn!("hourly rate {r} + c {} clipped to 0", policy.c);
            }
            shifted.max(0.0)
        })
        .collect();
    let mut traj = simulate_mt_mn(&cfg, n_events, seed)?;
    traj.meta.insert("generator".into(), "counterfactual".into());
    traj.meta.insert("policy_c".into(), serde_json::json!(policy.c));
    traj.meta
        .insert("policy_n".into(), serde_json::json!(policy.n_servers));
    Ok(traj)
}
