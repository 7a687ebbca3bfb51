//! Exact conditional distributions and optimal losses for Markovian
//! queues, plus the Bayesian-bootstrap uncertainty oracle.
//!
//! For an M/M/n state the next-event conditional is fully determined:
//! arrivals compete at the class arrival rates, busy servers complete at
//! the service rate of the class they hold, and the inter-event time is
//! exponential at the total rate. These conditionals give both the
//! per-step optimal losses on simulated tables and the transition kernel
//! used by the posterior machinery in [`posterior`].

mod posterior;

pub use posterior::{
    bayesian_bootstrap, bayesian_bootstrap_block, posterior_update, BootstrapMetric,
    GridPosterior, PosteriorError, DEFAULT_GRID,
};

use crate::events::{EventRecord, EventSchema, SchemaError, SystemState, Trajectory, Transition};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("rates must be positive: {0}")]
    NonPositiveRate(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Next-event conditional of an M/M/n state: event probabilities (index 0
/// is the arrival, index 1+j the departure from server j), per-event
/// class conditionals, and the exponential rate of the inter-event time.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConditional {
    pub event_probs: Vec<f64>,
    /// `class_probs[e][c]`; all-zero rows mark impossible events.
    pub class_probs: Vec<Vec<f64>>,
    pub rate: f64,
}

impl OracleConditional {
    /// Per-step losses of a realized record under this conditional:
    /// event and class negative log-likelihoods and the squared error of
    /// the predicted mean time. The class term of a single-class system
    /// is zero.
    pub fn step_losses(&self, rec: &EventRecord) -> (f64, f64, f64) {
        let ev = -self.event_probs[rec.event].ln();
        let cl = match rec.class {
            Some(c) => -self.class_probs[rec.event][c].ln(),
            None => 0.0,
        };
        let d = 1.0 / self.rate - rec.dt;
        (ev, cl, d * d)
    }
}

/// Exact next-event conditional for a multi-class M/M/n state.
pub fn mmn_conditional(
    state: &SystemState,
    lambdas: &[f64],
    nus: &[f64],
) -> Result<OracleConditional, OracleError> {
    if lambdas.is_empty() || lambdas.len() != nus.len() {
        return Err(OracleError::NonPositiveRate(
            "lambdas and nus must be nonempty and of equal length".into(),
        ));
    }
    if lambdas.iter().chain(nus).any(|&r| !(r > 0.0)) {
        return Err(OracleError::NonPositiveRate(format!(
            "lambdas {lambdas:?}, nus {nus:?}"
        )));
    }
    let k = lambdas.len();
    let servers = &state.nodes[0].servers;
    for occ in servers.iter().flatten() {
        if *occ >= k {
            return Err(OracleError::InvalidState(format!(
                "server occupancy code {occ} out of range for {k} classes"
            )));
        }
    }

    let lambda_total: f64 = lambdas.iter().sum();
    let mut rate = lambda_total;
    let mut event_probs = vec![0.0; 1 + servers.len()];
    let mut class_probs = vec![vec![0.0; k]; 1 + servers.len()];
    for (j, occ) in servers.iter().enumerate() {
        if let Some(c) = occ {
            rate += nus[*c];
            class_probs[1 + j][*c] = 1.0;
        }
    }
    event_probs[0] = lambda_total / rate;
    for (c, &l) in lambdas.iter().enumerate() {
        class_probs[0][c] = l / lambda_total;
    }
    for (j, occ) in servers.iter().enumerate() {
        if let Some(c) = occ {
            event_probs[1 + j] = nus[*c] / rate;
        }
    }
    Ok(OracleConditional {
        event_probs,
        class_probs,
        rate,
    })
}

/// Closed-form optimal event and time losses of an M/M/1 queue.
///
/// For traffic intensity below one the event loss is
/// `-[(l/n) ln(l/(l+n)) + ln(n/(l+n))] / 2` and the time loss
/// `n / (2 l^2 (l+n))`; at or above one the jump chain is a coin flip at
/// the combined rate, giving the binary entropy of `l/(l+n)` and
/// `1/(l+n)^2`. The boundary `rho = 1` uses the second branch.
pub fn mm1_optimal_losses(lambda: f64, nu: f64) -> Result<(f64, f64), OracleError> {
    if !(lambda > 0.0) || !(nu > 0.0) {
        return Err(OracleError::NonPositiveRate(format!(
            "lambda {lambda}, nu {nu}"
        )));
    }
    let total = lambda + nu;
    if lambda < nu {
        let event = -0.5 * (lambda / nu * (lambda / total).ln() + (nu / total).ln());
        let time = nu / (2.0 * lambda * lambda * total);
        Ok((event, time))
    } else {
        let pa = lambda / total;
        let event = -(pa * pa.ln() + (1.0 - pa) * (1.0 - pa).ln());
        let time = 1.0 / (total * total);
        Ok((event, time))
    }
}

/// Averaged per-step losses with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgLosses {
    pub event: f64,
    pub time: f64,
    pub class: f64,
    pub event_se: f64,
    pub time_se: f64,
    pub class_se: f64,
    pub n_steps: usize,
}

/// Empirical optimal losses on M/M/n trajectories: replay each table,
/// evaluate the exact conditional before every event, and average the
/// per-step losses over all steps of all trajectories.
pub fn empirical_optimal_losses(
    trajs: &[Trajectory],
    schema: &EventSchema,
    lambdas: &[f64],
    nus: &[f64],
) -> Result<AvgLosses, OracleError> {
    let mut acc = LossAccum::default();
    for traj in trajs {
        let mut state = traj.initial_state.clone();
        for (i, rec) in traj.records.iter().enumerate() {
            let cond = mmn_conditional(&state, lambdas, nus)?;
            acc.push(cond.step_losses(rec));
            schema.apply(&mut state, i, rec)?;
        }
    }
    Ok(acc.finish())
}

#[derive(Default)]
pub(crate) struct LossAccum {
    n: usize,
    sums: [f64; 3],
    sq_sums: [f64; 3],
}

impl LossAccum {
    pub(crate) fn push(&mut self, (ev, cl, tm): (f64, f64, f64)) {
        self.n += 1;
        for (i, v) in [ev, tm, cl].into_iter().enumerate() {
            self.sums[i] += v;
            self.sq_sums[i] += v * v;
        }
    }

    pub(crate) fn finish(&self) -> AvgLosses {
        let n = self.n as f64;
        let se = |i: usize| {
            let m = self.sums[i] / n;
            ((self.sq_sums[i] / n - m * m).max(0.0) / n).sqrt()
        };
        AvgLosses {
            event: self.sums[0] / n,
            time: self.sums[1] / n,
            class: self.sums[2] / n,
            event_se: se(0),
            time_se: se(1),
            class_se: se(2),
            n_steps: self.n,
        }
    }
}

/// True iff the schema is a single-node M/M/n-style vocabulary
/// (one arrival event plus per-server departures), as required by the
/// oracle conditionals.
pub fn is_mmn_schema(schema: &EventSchema) -> bool {
    schema.nodes.len() == 1
        && schema.transitions.first() == Some(&Transition::Arrive { node: 0 })
        && schema.transitions.iter().skip(1).enumerate().all(|(j, t)| {
            matches!(t, Transition::Depart { node: 0, server: crate::events::ServerSel::Fixed { server } } if *server == j)
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queuesim::{simulate_mmn, MmnConfig};

    #[test]
    fn empty_system_forces_arrival() {
        let cfg = MmnConfig::mm1(0.7, 1.3);
        let state = cfg.schema().empty_state();
        let cond = mmn_conditional(&state, &cfg.lambdas, &cfg.nus).unwrap();
        assert!((cond.event_probs[0] - 1.0).abs() < 1e-12);
        assert!((cond.rate - 0.7).abs() < 1e-12);
    }

    #[test]
    fn two_busy_servers_split_evenly() {
        let cfg = MmnConfig {
            lambdas: vec![1.0, 1.0],
            nus: vec![1.0, 1.0],
            n_servers: 2,
            discipline: Default::default(),
        };
        let mut state = cfg.schema().empty_state();
        state.nodes[0].servers = vec![Some(0), Some(1)];
        let cond = mmn_conditional(&state, &cfg.lambdas, &cfg.nus).unwrap();
        assert!((cond.event_probs[0] - 0.5).abs() < 1e-12);
        assert!((cond.rate - 4.0).abs() < 1e-12);
    }

    #[test]
    fn class_given_arrival_is_proportional() {
        let cfg = MmnConfig {
            lambdas: vec![1.0, 3.0],
            nus: vec![1.0, 1.0],
            n_servers: 1,
            discipline: Default::default(),
        };
        let state = cfg.schema().empty_state();
        let cond = mmn_conditional(&state, &cfg.lambdas, &cfg.nus).unwrap();
        assert!((cond.class_probs[0][0] - 0.25).abs() < 1e-12);
        assert!((cond.class_probs[0][1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn conditional_probabilities_normalize() {
        let cfg = MmnConfig {
            lambdas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            nus: vec![0.8, 0.8, 0.8, 1.0, 1.0],
            n_servers: 5,
            discipline: Default::default(),
        };
        let schema = cfg.schema();
        let traj = simulate_mmn(&cfg, 2000, 5).unwrap();
        let mut state = traj.initial_state.clone();
        for (i, rec) in traj.records.iter().enumerate() {
            let cond = mmn_conditional(&state, &cfg.lambdas, &cfg.nus).unwrap();
            let sum: f64 = cond.event_probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (e, cps) in cond.class_probs.iter().enumerate() {
                let s: f64 = cps.iter().sum();
                if cond.event_probs[e] > 0.0 {
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            schema.apply(&mut state, i, rec).unwrap();
        }
    }

    #[test]
    fn closed_form_table_values() {
        let (e, t) = mm1_optimal_losses(0.5, 1.0).unwrap();
        assert!((e - 0.4775).abs() < 0.4775 * 0.005, "event {e}");
        assert!((t - 1.333).abs() < 1.333 * 0.005, "time {t}");
        let (e2, t2) = mm1_optimal_losses(2.0, 1.0).unwrap();
        assert!((e2 - 0.6364).abs() < 0.6364 * 0.005, "event {e2}");
        assert!((t2 - 0.1111).abs() < 0.1111 * 0.005, "time {t2}");
        let (_, t3) = mm1_optimal_losses(0.8, 1.0).unwrap();
        assert!((t3 - 0.434).abs() < 0.434 * 0.005, "time {t3}");
    }

    #[test]
    fn nonpositive_rate_rejected() {
        assert!(matches!(
            mm1_optimal_losses(0.0, 1.0),
            Err(OracleError::NonPositiveRate(_))
        ));
    }

    #[test]
    fn empirical_matches_closed_form_at_moderate_size() {
        let cfg = MmnConfig::mm1(0.5, 1.0);
        let schema = cfg.schema();
        let traj = simulate_mmn(&cfg, 120_000, 77).unwrap();
        let losses =
            empirical_optimal_losses(std::slice::from_ref(&traj), &schema, &cfg.lambdas, &cfg.nus)
                .unwrap();
        let (event, time) = mm1_optimal_losses(0.5, 1.0).unwrap();
        assert!(
            (losses.event - event).abs() / event < 0.02,
            "event {} vs {event}",
            losses.event
        );
        assert!(
            (losses.time - time).abs() / time < 0.03,
            "time {} vs {time}",
            losses.time
        );
        // Single class: the class loss is identically zero.
        assert_eq!(losses.class, 0.0);
    }

    #[test]
    fn mmn_schema_recognition() {
        assert!(is_mmn_schema(&MmnConfig::mm1(1.0, 2.0).schema()));
        assert!(!is_mmn_schema(&crate::queuesim::three_node_schema()));
    }
}
