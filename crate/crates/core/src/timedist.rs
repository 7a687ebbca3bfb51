//! Discretized inter-event-time distributions and the exponential head.
//!
//! [`RiemannDist`] is a piecewise-uniform density over `n` equal-width
//! bins where the last bin stretches to infinity as a half-normal tail:
//! bins `0..n-1` cover `[0, (n-1)w)` uniformly within each bin, and bin
//! `n-1` covers `[(n-1)w, inf)` with half-normal shape scaled by the bin
//! probability. The exponential-head helpers back the Markovian mode of
//! the sequence model, where a single raw output is mapped to a positive
//! rate through a softplus.

use crate::rng::SplitMix64;
use thiserror::Error;

/// Added to the softplus output so the rate stays strictly positive.
pub const EXP_HEAD_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum TimeDistError {
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("invalid distribution: {0}")]
    Invalid(String),
}

/// Riemann-discretized distribution over nonnegative times.
#[derive(Debug, Clone, PartialEq)]
pub struct RiemannDist {
    w: f64,
    probs: Vec<f64>,
    tail_scale: f64,
}

impl RiemannDist {
    /// `probs` must be nonnegative and sum to 1 within 1e-9. The tail
    /// scale defaults to `w` when `None`.
    pub fn new(w: f64, probs: Vec<f64>, tail_scale: Option<f64>) -> Result<Self, TimeDistError> {
        if !(w > 0.0) {
            return Err(TimeDistError::Invalid(format!("bin width {w}")));
        }
        if probs.is_empty() {
            return Err(TimeDistError::Invalid("no bins".into()));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(TimeDistError::Invalid("negative bin probability".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TimeDistError::Invalid(format!("probs sum to {total}")));
        }
        let tail_scale = tail_scale.unwrap_or(w);
        if !(tail_scale > 0.0) {
            return Err(TimeDistError::Invalid(format!("tail scale {tail_scale}")));
        }
        Ok(Self {
            w,
            probs,
            tail_scale,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.probs.len()
    }

    pub fn bin_width(&self) -> f64 {
        self.w
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn tail_scale(&self) -> f64 {
        self.tail_scale
    }

    /// Start of the half-normal tail, `(n-1)w`.
    pub fn tail_edge(&self) -> f64 {
        (self.probs.len() - 1) as f64 * self.w
    }

    /// Bin index of time `t`: `min(floor(t/w), n-1)`.
    pub fn bin_index(&self, t: f64) -> usize {
        ((t / self.w).floor() as usize).min(self.probs.len() - 1)
    }

    /// Log-density at `t >= 0`. Inside bin k < n-1 the density is
    /// `probs[k]/w`; in the tail it is the bin probability times a
    /// half-normal density over the overhang `t - (n-1)w`.
    pub fn logpdf(&self, t: f64) -> Result<f64, TimeDistError> {
        if t < 0.0 || !t.is_finite() {
            return Err(TimeDistError::NegativeTime(t));
        }
        let k = self.bin_index(t);
        if k + 1 < self.probs.len() {
            Ok(self.probs[k].ln() - self.w.ln())
        } else {
            Ok(self.probs[k].ln() + half_normal_logpdf(t - self.tail_edge(), self.tail_scale))
        }
    }

    /// Inverse-CDF sample: categorical over bins, then uniform within the
    /// bin or half-normal overhang in the tail.
    pub fn sample(&self, rng: &mut SplitMix64) -> f64 {
        let k = rng.categorical(&self.probs);
        if k + 1 < self.probs.len() {
            rng.uniform(k as f64 * self.w, (k + 1) as f64 * self.w)
        } else {
            self.tail_edge() + self.tail_scale * rng.normal().abs()
        }
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        let n = self.probs.len();
        let mut h = 0.0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            if k + 1 < n {
                h -= p * (p / self.w).ln();
            } else {
                // Half-normal entropy: ln(sigma sqrt(pi/2)) + 1/2.
                let h_tail =
                    (self.tail_scale * (std::f64::consts::PI / 2.0).sqrt()).ln() + 0.5;
                h += p * (h_tail - p.ln());
            }
        }
        h
    }

    /// Mean of the distribution (bin midpoints plus the tail mean).
    pub fn mean(&self) -> f64 {
        let n = self.probs.len();
        let mut m = 0.0;
        for (k, &p) in self.probs.iter().enumerate() {
            if k + 1 < n {
                m += p * (k as f64 + 0.5) * self.w;
            } else {
                m += p * (self.tail_edge()
                    + self.tail_scale * (2.0 / std::f64::consts::PI).sqrt());
            }
        }
        m
    }

    /// Bin width for an `n`-bin grid whose tail edge `(n-1)w` covers the
    /// 99.9th percentile of the observed times.
    pub fn fit_width(samples: &[f64], n_bins: usize) -> f64 {
        assert!(n_bins >= 2 && !samples.is_empty());
        let mut sorted: Vec<f64> = samples.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let idx = ((sorted.len() as f64 * 0.999).ceil() as usize).clamp(1, sorted.len()) - 1;
        let p999 = sorted[idx].max(f64::MIN_POSITIVE);
        p999 / (n_bins - 1) as f64
    }
}

fn half_normal_logpdf(x: f64, sigma: f64) -> f64 {
    debug_assert!(x >= 0.0);
    0.5 * (2.0 / std::f64::consts::PI).ln() - sigma.ln() - x * x / (2.0 * sigma * sigma)
}

/// Stable softplus.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map a raw head output to a strictly positive exponential rate.
#[inline]
pub fn exp_head_rate(raw: f64) -> f64 {
    softplus(raw) + EXP_HEAD_EPS
}

/// Negative log-likelihood of `t` under an exponential with rate
/// `exp_head_rate(raw)`.
#[inline]
pub fn exp_head_nll(raw: f64, t: f64) -> f64 {
    let rate = exp_head_rate(raw);
    rate * t - rate.ln()
}

/// Derivative of [`exp_head_nll`] with respect to the raw output.
#[inline]
pub fn exp_head_nll_grad(raw: f64, t: f64) -> f64 {
    let rate = exp_head_rate(raw);
    (t - 1.0 / rate) * sigmoid(raw)
}

/// Squared-error evaluation metric between the predicted mean time
/// `1/rate` and the realized inter-event time.
#[inline]
pub fn time_sq_metric(rate: f64, t: f64) -> f64 {
    let d = 1.0 / rate - t;
    d * d
}

/// Midpoint quadrature of the density, segmented at the bin edges so the
/// jump discontinuities sit on segment boundaries. Test oracle; also
/// used by the acceptance suite.
pub fn quadrature_mass(d: &RiemannDist) -> f64 {
    let mut total = 0.0;
    let steps_per_segment = 50_000usize;
    for k in 0..d.num_bins() - 1 {
        let (lo, hi) = (k as f64 * d.bin_width(), (k + 1) as f64 * d.bin_width());
        let h = (hi - lo) / steps_per_segment as f64;
        total += (0..steps_per_segment)
            .map(|i| d.logpdf(lo + (i as f64 + 0.5) * h).unwrap().exp() * h)
            .sum::<f64>();
    }
    let lo = d.tail_edge();
    let hi = lo + 14.0 * d.tail_scale();
    let steps = 200_000usize;
    let h = (hi - lo) / steps as f64;
    total
        + (0..steps)
            .map(|i| d.logpdf(lo + (i as f64 + 0.5) * h).unwrap().exp() * h)
            .sum::<f64>()
}
