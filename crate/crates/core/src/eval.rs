//! Evaluation metrics: teacher-forced model losses, binned KL divergence,
//! exact 1-D Wasserstein distance, valid-trajectory fraction, and
//! three-node network classification.

use crate::events::{is_valid, EventSchema, Trajectory};
use crate::queuesim::{permitted_events, THREE_NODE_NETWORKS};
use crate::seqmodel::{sequence_step_losses, ModelParams, TokenSequence};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("too few samples: {0} (need at least {1})")]
    TooFewSamples(usize, usize),
}

/// Teacher-forced test losses with standard errors over steps.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossReport {
    pub event_loss: f64,
    /// Squared-error time metric `(1/rate - dt)^2` in exponential mode;
    /// squared error against the head mean in Riemann mode.
    pub time_loss: f64,
    pub class_loss: f64,
    /// Time negative log-likelihood (the trained objective).
    pub time_nll: f64,
    pub event_se: f64,
    pub time_se: f64,
    pub class_se: f64,
    pub n_steps: usize,
}

/// Evaluate a trained model on encoded test sequences.
pub fn model_losses(params: &ModelParams, test_set: &[TokenSequence]) -> LossReport {
    let steps: Vec<(f64, f64, f64, f64)> = test_set
        .par_iter()
        .map(|s| sequence_step_losses(params, s))
        .flatten_iter()
        .collect();
    let n = steps.len().max(1) as f64;
    let mean = |sel: fn(&(f64, f64, f64, f64)) -> f64| -> (f64, f64) {
        let m = steps.iter().map(sel).sum::<f64>() / n;
        let var = steps.iter().map(|s| (sel(s) - m) * (sel(s) - m)).sum::<f64>() / n;
        (m, (var / n).sqrt())
    };
    let (event_loss, event_se) = mean(|s| s.0);
    let (class_loss, class_se) = mean(|s| s.1);
    let (time_nll, _) = mean(|s| s.2);
    let (time_loss, time_se) = mean(|s| s.3);
    LossReport {
        event_loss,
        time_loss,
        class_loss,
        time_nll,
        event_se,
        time_se,
        class_se,
        n_steps: steps.len(),
    }
}

/// KL divergence between two sample sets over a shared equal-width
/// histogram (bins from the pooled range, one Laplace count per bin).
pub fn kl_binned(samples_p: &[f64], samples_q: &[f64], bins: usize) -> Result<f64, EvalError> {
    const MIN_SAMPLES: usize = 100;
    for s in [samples_p, samples_q] {
        if s.len() < MIN_SAMPLES {
            return Err(EvalError::TooFewSamples(s.len(), MIN_SAMPLES));
        }
    }
    let lo = samples_p
        .iter()
        .chain(samples_q)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = samples_p
        .iter()
        .chain(samples_q)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let bin_of = |x: f64| (((x - lo) / span * bins as f64) as usize).min(bins - 1);
    let histogram = |xs: &[f64]| -> Vec<f64> {
        let mut counts = vec![1.0; bins];
        for &x in xs {
            counts[bin_of(x)] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        counts.into_iter().map(|c| c / total).collect()
    };
    let p = histogram(samples_p);
    let q = histogram(samples_q);
    Ok(p.iter()
        .zip(&q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi * (pi / qi).ln()
            } else {
                0.0
            }
        })
        .sum())
}

/// Default histogram resolution of [`kl_binned`].
pub const KL_DEFAULT_BINS: usize = 50;

/// Exact Wasserstein-1 distance between two empirical distributions:
/// the area between the empirical CDFs.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|x, y| x.total_cmp(y));
    xb.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut w = 0.0;
    let mut prev = xa[0].min(xb[0]);
    while ia < xa.len() || ib < xb.len() {
        let x = match (xa.get(ia), xb.get(ib)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => break,
        };
        w += (ia as f64 / na - ib as f64 / nb).abs() * (x - prev);
        prev = x;
        while ia < xa.len() && xa[ia] <= x {
            ia += 1;
        }
        while ib < xb.len() && xb[ib] <= x {
            ib += 1;
        }
    }
    w
}

/// Fraction of trajectories replaying without a schema violation.
pub fn valid_fraction(trajs: &[Trajectory], schema: &EventSchema) -> f64 {
    if trajs.is_empty() {
        return 1.0;
    }
    let ok = trajs
        .par_iter()
        .filter(|t| is_valid(t, schema))
        .count();
    ok as f64 / trajs.len() as f64
}

/// Identify the three-node network a trajectory came from: the unique
/// network whose permitted-event set contains all observed events, or
/// `None` when several (or none) qualify.
pub fn classify_network(traj: &Trajectory) -> Option<usize> {
    let mut seen = [false; crate::queuesim::NUM_THREE_NODE_EVENTS];
    for rec in &traj.records {
        if rec.event >= seen.len() {
            return None;
        }
        seen[rec.event] = true;
    }
    let mut matches = THREE_NODE_NETWORKS.iter().filter(|&&id| {
        let allowed = permitted_events(id).expect("known id");
        seen.iter()
            .enumerate()
            .all(|(e, &s)| !s || allowed.contains(&e))
    });
    match (matches.next(), matches.next()) {
        (Some(&id), None) => Some(id),
        _ => None,
    }
}

/// UQ comparison between model-generated and bootstrap metric samples.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct UqComparison {
    pub kl: f64,
    pub w1: f64,
}

pub fn uq_compare(model_f: &[f64], bootstrap_f: &[f64]) -> Result<UqComparison, EvalError> {
    Ok(UqComparison {
        kl: kl_binned(model_f, bootstrap_f, KL_DEFAULT_BINS)?,
        w1: wasserstein1(model_f, bootstrap_f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventRecord;
    use crate::queuesim::{simulate_threenode, three_node_schema, ThreeNodeConfig};
    use crate::rng::SplitMix64;

    #[test]
    fn kl_of_identical_sets_is_tiny() {
        let mut rng = SplitMix64::new(1);
        let xs: Vec<f64> = (0..10_000).map(|_| rng.exponential(1.0)).collect();
        let kl = kl_binned(&xs, &xs, KL_DEFAULT_BINS).unwrap();
        assert!(kl < 0.01, "kl {kl}");
    }

    #[test]
    fn kl_of_disjoint_supports_is_large_but_finite() {
        let a: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
        let b: Vec<f64> = (0..200).map(|i| 10.0 + i as f64 / 200.0).collect();
        let kl = kl_binned(&a, &b, KL_DEFAULT_BINS).unwrap();
        assert!(kl.is_finite() && kl > 1.0, "kl {kl}");
    }

    #[test]
    fn kl_matches_quadrature_for_exponentials() {
        // Closed form: KL(Exp(1) || Exp(2)) = ln(1/2) + 2/1 - 1.
        let expect = 0.5f64.ln() + 1.0;
        let mut rng = SplitMix64::new(2);
        let p: Vec<f64> = (0..100_000).map(|_| rng.exponential(1.0)).collect();
        let q: Vec<f64> = (0..100_000).map(|_| rng.exponential(2.0)).collect();
        let kl = kl_binned(&p, &q, KL_DEFAULT_BINS).unwrap();
        assert!(
            (kl - expect).abs() / expect < 0.10,
            "kl {kl} vs closed form {expect}"
        );
    }

    #[test]
    fn too_few_samples_rejected() {
        let xs = vec![1.0; 99];
        assert!(matches!(
            kl_binned(&xs, &xs, 10),
            Err(EvalError::TooFewSamples(99, 100))
        ));
    }

    #[test]
    fn w1_basics() {
        let a = vec![0.0, 0.0, 0.0];
        let b = vec![1.0, 1.0, 1.0];
        assert!((wasserstein1(&a, &a) - 0.0).abs() < 1e-12);
        assert!((wasserstein1(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn w1_detects_uniform_shift() {
        let mut rng = SplitMix64::new(3);
        let a: Vec<f64> = (0..100_000).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = (0..100_000).map(|_| rng.next_f64() + 0.5).collect();
        let w = wasserstein1(&a, &b);
        assert!((w - 0.5).abs() < 0.01, "w1 {w}");
    }

    #[test]
    fn w1_unequal_sizes_matches_equal_size_estimate() {
        let mut rng = SplitMix64::new(4);
        let a: Vec<f64> = (0..4000).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = (0..9000).map(|_| rng.next_f64() + 0.3).collect();
        let w = wasserstein1(&a, &b);
        assert!((w - 0.3).abs() < 0.02, "w1 {w}");
    }

    #[test]
    fn w1_triangle_inequality_on_samples() {
        let mut rng = SplitMix64::new(5);
        let a: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..2000).map(|_| rng.normal() + 1.0).collect();
        let c: Vec<f64> = (0..2000).map(|_| rng.exponential(0.7)).collect();
        let ab = wasserstein1(&a, &b);
        let bc = wasserstein1(&b, &c);
        let ac = wasserstein1(&a, &c);
        assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn valid_fraction_counts_corrupted_tables() {
        let cfg = ThreeNodeConfig::default();
        let schema = three_node_schema();
        let mut trajs: Vec<Trajectory> = (0..3)
            .map(|s| simulate_threenode(1, &cfg, 100, s).unwrap())
            .collect();
        // Corrupt one: a departure from node 3 as the very first event of
        // an empty system.
        let mut bad = trajs[0].clone();
        bad.records.insert(
            0,
            EventRecord {
                dt: 0.1,
                event: 8,
                class: None,
            },
        );
        trajs.push(bad);
        let frac = valid_fraction(&trajs, &schema);
        assert!((frac - 0.75).abs() < 1e-12);
    }

    #[test]
    fn classify_prefers_unique_network() {
        let cfg = ThreeNodeConfig::default();
        let traj = simulate_threenode(2, &cfg, 400, 11).unwrap();
        assert_eq!(classify_network(&traj), Some(2));
        // A single shared arrival event is ambiguous.
        let stub = Trajectory::new(
            three_node_schema().empty_state(),
            vec![EventRecord {
                dt: 1.0,
                event: 0,
                class: None,
            }],
        );
        assert_eq!(classify_network(&stub), None);
    }
}
