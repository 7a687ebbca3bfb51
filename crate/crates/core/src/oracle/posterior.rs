//! Grid posterior over M/M/1 rates and the Bayesian-bootstrap oracle.
//!
//! The prior is uniform on a box and the M/M/1 path likelihood separates
//! into an arrival part (arrival count, total elapsed time) and a service
//! part (departure count, busy time), so the posterior factorizes into
//! independent marginals over the two grid axes. The implementation
//! exploits that: log-weights are kept as two per-axis accumulators whose
//! outer sum is the full matrix, making per-event updates and sampling
//! linear in the grid size instead of quadratic.

use super::OracleError;
use crate::events::{
    customer_log, EventRecord, EventSchema, Trajectory, Transition,
};
use crate::queuesim::PriorConfig;
use crate::rng::SplitMix64;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PosteriorError {
    #[error("degenerate posterior: all grid weights underflowed (grid/support mismatch)")]
    Degenerate,
    #[error("history is not a single-server Markovian event table")]
    UnsupportedHistory,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Default grid resolution per axis.
pub const DEFAULT_GRID: usize = 101;

/// Posterior over `(lambda, nu)` on a product grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    pub lambda_grid: Vec<f64>,
    pub nu_grid: Vec<f64>,
    ln_lambda: Vec<f64>,
    ln_nu: Vec<f64>,
    log_w_lambda: Vec<f64>,
    log_w_nu: Vec<f64>,
    normalized: bool,
}

impl GridPosterior {
    /// Uniform posterior on `n x n` cell centers of the prior box.
    pub fn uniform(prior: &PriorConfig, n: usize) -> Self {
        let centers = |range: [f64; 2]| -> Vec<f64> {
            let step = (range[1] - range[0]) / n as f64;
            (0..n).map(|i| range[0] + (i as f64 + 0.5) * step).collect()
        };
        Self::with_grids(centers(prior.lambda_range), centers(prior.nu_range))
    }

    /// Uniform posterior on explicit grid points.
    pub fn with_grids(lambda_grid: Vec<f64>, nu_grid: Vec<f64>) -> Self {
        assert!(!lambda_grid.is_empty() && !nu_grid.is_empty());
        assert!(lambda_grid.iter().chain(&nu_grid).all(|&x| x > 0.0));
        Self {
            ln_lambda: lambda_grid.iter().map(|x| x.ln()).collect(),
            ln_nu: nu_grid.iter().map(|x| x.ln()).collect(),
            log_w_lambda: vec![0.0; lambda_grid.len()],
            log_w_nu: vec![0.0; nu_grid.len()],
            normalized: true,
            lambda_grid,
            nu_grid,
        }
    }

    /// Add one event's log-likelihood: the realized transition component
    /// at its rate, minus total rate times the elapsed time.
    pub fn update_step(&mut self, occ_before: usize, dt: f64, is_arrival: bool) {
        for (i, lw) in self.log_w_lambda.iter_mut().enumerate() {
            *lw += if is_arrival { self.ln_lambda[i] } else { 0.0 } - self.lambda_grid[i] * dt;
        }
        let busy = occ_before > 0;
        for (j, lw) in self.log_w_nu.iter_mut().enumerate() {
            *lw += if is_arrival { 0.0 } else { self.ln_nu[j] }
                - if busy { self.nu_grid[j] * dt } else { 0.0 };
        }
        self.normalized = false;
    }

    /// Renormalize both marginals in log space.
    pub fn normalize(&mut self) -> Result<(), PosteriorError> {
        for acc in [&mut self.log_w_lambda, &mut self.log_w_nu] {
            let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(PosteriorError::Degenerate);
            }
            let lse = max
                + acc
                    .iter()
                    .map(|&w| (w - max).exp())
                    .sum::<f64>()
                    .ln();
            for w in acc.iter_mut() {
                *w -= lse;
            }
        }
        self.normalized = true;
        Ok(())
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Joint log-weight at grid indices `(i, j)`.
    pub fn log_weight(&self, i: usize, j: usize) -> f64 {
        self.log_w_lambda[i] + self.log_w_nu[j]
    }

    /// Normalized joint weights, row-major over `(lambda, nu)`.
    pub fn weights(&self) -> Result<Vec<f64>, PosteriorError> {
        let mut copy = self.clone();
        copy.normalize()?;
        let mut out = Vec::with_capacity(copy.lambda_grid.len() * copy.nu_grid.len());
        for i in 0..copy.lambda_grid.len() {
            for j in 0..copy.nu_grid.len() {
                out.push(copy.log_weight(i, j).exp());
            }
        }
        Ok(out)
    }

    fn marginal_probs(acc: &[f64]) -> Result<Vec<f64>, PosteriorError> {
        let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(PosteriorError::Degenerate);
        }
        let un: Vec<f64> = acc.iter().map(|&w| (w - max).exp()).collect();
        let total: f64 = un.iter().sum();
        Ok(un.into_iter().map(|w| w / total).collect())
    }

    /// Posterior means of the two rates.
    pub fn mean(&self) -> Result<(f64, f64), PosteriorError> {
        let pl = Self::marginal_probs(&self.log_w_lambda)?;
        let pn = Self::marginal_probs(&self.log_w_nu)?;
        let ml = self.lambda_grid.iter().zip(&pl).map(|(x, p)| x * p).sum();
        let mn = self.nu_grid.iter().zip(&pn).map(|(x, p)| x * p).sum();
        Ok((ml, mn))
    }

    /// Index of the maximum-weight lambda grid point.
    pub fn argmax_lambda(&self) -> usize {
        self.log_w_lambda
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap()
    }

    /// Draw `(lambda, nu)` from the posterior; the product structure
    /// makes the marginals independent.
    pub fn sample(&self, rng: &mut SplitMix64) -> Result<(f64, f64), PosteriorError> {
        let pl = Self::marginal_probs(&self.log_w_lambda)?;
        let pn = Self::marginal_probs(&self.log_w_nu)?;
        let li = rng.categorical(&pl);
        let nj = rng.categorical(&pn);
        Ok((self.lambda_grid[li], self.nu_grid[nj]))
    }
}

fn require_mm1(schema: &EventSchema) -> Result<(), PosteriorError> {
    let ok = schema.nodes.len() == 1
        && schema.nodes[0].servers == 1
        && schema.num_events() == 2
        && matches!(schema.transitions[0], Transition::Arrive { .. })
        && matches!(schema.transitions[1], Transition::Depart { .. });
    if ok {
        Ok(())
    } else {
        Err(PosteriorError::UnsupportedHistory)
    }
}

/// Fold an M/M/1 history into the posterior (exact path likelihood:
/// each step contributes the log transition-rate component plus the
/// exponential log-density of the elapsed time given the state), then
/// renormalize.
pub fn posterior_update(
    post: &mut GridPosterior,
    history: &Trajectory,
    schema: &EventSchema,
) -> Result<(), PosteriorError> {
    require_mm1(schema)?;
    let mut occ = history.initial_state.occupancy();
    for rec in &history.records {
        let is_arrival = rec.event == 0;
        post.update_step(occ, rec.dt, is_arrival);
        occ = if is_arrival { occ + 1 } else { occ.saturating_sub(1) };
    }
    post.normalize()
}

/// Trajectory-level performance statistic evaluated on a continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapMetric {
    MeanInterarrival,
    MeanService,
    MeanWait,
}

impl BootstrapMetric {
    /// Average the metric over the part of `traj` after time `t_split`
    /// (inter-arrival gaps beginning after the split; waiting and service
    /// times of customers arriving after it).
    pub fn evaluate(
        &self,
        traj: &Trajectory,
        schema: &EventSchema,
        t_split: f64,
    ) -> Result<f64, PosteriorError> {
        let vals: Vec<f64> = match self {
            BootstrapMetric::MeanInterarrival => {
                let arrivals: Vec<f64> = {
                    let mut t = traj.initial_state.clock;
                    traj.records
                        .iter()
                        .filter_map(|r| {
                            t += r.dt;
                            (r.event == 0).then_some(t)
                        })
                        .collect()
                };
                arrivals
                    .windows(2)
                    .filter(|w| w[0] > t_split)
                    .map(|w| w[1] - w[0])
                    .collect()
            }
            BootstrapMetric::MeanService | BootstrapMetric::MeanWait => {
                let log = customer_log(traj, schema).map_err(|e| {
                    PosteriorError::Invalid(format!("metric extraction failed: {e}"))
                })?;
                log.iter()
                    .filter(|c| !c.initial && c.stages[0].entered > t_split)
                    .filter_map(|c| match self {
                        BootstrapMetric::MeanService => c.stages[0].service_time(),
                        _ => c.stages[0].waiting_time(),
                    })
                    .collect()
            }
        };
        if vals.is_empty() {
            return Err(PosteriorError::Invalid(
                "no metric samples in the continuation".into(),
            ));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

struct PreparedHistory {
    occ: usize,
    t_split: f64,
    posterior: GridPosterior,
}

fn prepare(
    history: &Trajectory,
    schema: &EventSchema,
    prior: &PriorConfig,
    total_len: usize,
) -> Result<PreparedHistory, PosteriorError> {
    if total_len <= history.len() {
        return Err(PosteriorError::Invalid(format!(
            "total length {total_len} must exceed the history length {}",
            history.len()
        )));
    }
    let mut posterior = GridPosterior::uniform(prior, DEFAULT_GRID);
    posterior_update(&mut posterior, history, schema)?;
    let mut occ = history.initial_state.occupancy();
    for rec in &history.records {
        occ = if rec.event == 0 { occ + 1 } else { occ - 1 };
    }
    let t_split = history.initial_state.clock + history.records.iter().map(|r| r.dt).sum::<f64>();
    Ok(PreparedHistory {
        occ,
        t_split,
        posterior,
    })
}

fn extend_and_score(
    history: &Trajectory,
    schema: &EventSchema,
    continuation: Vec<EventRecord>,
    metric: BootstrapMetric,
    t_split: f64,
) -> Result<f64, PosteriorError> {
    let mut full = history.clone();
    full.records.extend(continuation);
    metric.evaluate(&full, schema, t_split)
}

/// Bayesian bootstrap with per-step parameter resampling: each replica
/// repeatedly samples rates from the running grid posterior, draws the
/// next `(dt, event)` from the sampled M/M/1 kernel, folds the new event
/// back into its private posterior, and finally evaluates the metric on
/// the continuation.
pub fn bayesian_bootstrap(
    history: &Trajectory,
    schema: &EventSchema,
    prior: &PriorConfig,
    replicas: usize,
    total_len: usize,
    metric: BootstrapMetric,
    seed: u64,
) -> Result<Vec<f64>, PosteriorError> {
    let prep = prepare(history, schema, prior, total_len)?;
    let steps = total_len - history.len();
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = SplitMix64::stream(seed, r as u64);
            let mut post = prep.posterior.clone();
            let mut occ = prep.occ;
            let mut continuation = Vec::with_capacity(steps);
            for _ in 0..steps {
                let (lambda, nu) = post.sample(&mut rng)?;
                let (dt, is_arrival) = mm1_step(occ, lambda, nu, &mut rng);
                post.update_step(occ, dt, is_arrival);
                occ = if is_arrival { occ + 1 } else { occ - 1 };
                continuation.push(EventRecord {
                    dt,
                    event: usize::from(!is_arrival),
                    class: None,
                });
            }
            extend_and_score(history, schema, continuation, metric, prep.t_split)
        })
        .collect()
}

/// Block-sampled variant: draw the rates once from the posterior given
/// the history, then simulate the whole continuation under them.
pub fn bayesian_bootstrap_block(
    history: &Trajectory,
    schema: &EventSchema,
    prior: &PriorConfig,
    replicas: usize,
    total_len: usize,
    metric: BootstrapMetric,
    seed: u64,
) -> Result<Vec<f64>, PosteriorError> {
    let prep = prepare(history, schema, prior, total_len)?;
    let steps = total_len - history.len();
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = SplitMix64::stream(seed, r as u64);
            let (lambda, nu) = prep.posterior.sample(&mut rng)?;
            let mut occ = prep.occ;
            let mut continuation = Vec::with_capacity(steps);
            for _ in 0..steps {
                let (dt, is_arrival) = mm1_step(occ, lambda, nu, &mut rng);
                occ = if is_arrival { occ + 1 } else { occ - 1 };
                continuation.push(EventRecord {
                    dt,
                    event: usize::from(!is_arrival),
                    class: None,
                });
            }
            extend_and_score(history, schema, continuation, metric, prep.t_split)
        })
        .collect()
}

/// One M/M/1 transition from a state with `occ` customers.
fn mm1_step(occ: usize, lambda: f64, nu: f64, rng: &mut SplitMix64) -> (f64, bool) {
    if occ == 0 {
        (rng.exponential(lambda), true)
    } else {
        let total = lambda + nu;
        let dt = rng.exponential(total);
        (dt, rng.next_f64() < lambda / total)
    }
}
