//! Small statistical helpers shared by tests and evaluation code:
//! Kolmogorov-Smirnov statistics with asymptotic critical values,
//! chi-square goodness of fit at fixed significance, Spearman rank
//! correlation, and basic moments.

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn std_err(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// One-sample KS statistic of `samples` against the given CDF.
pub fn ks_statistic_cdf<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let xs = sorted(samples);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i as f64 + 1.0) / n - f).abs());
    }
    d
}

/// Two-sample KS statistic.
pub fn ks_statistic_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let xa = sorted(a);
    let xb = sorted(b);
    let (na, nb) = (xa.len(), xb.len());
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut d: f64 = 0.0;
    while ia < na && ib < nb {
        let x = xa[ia].min(xb[ib]);
        while ia < na && xa[ia] <= x {
            ia += 1;
        }
        while ib < nb && xb[ib] <= x {
            ib += 1;
        }
        d = d.max((ia as f64 / na as f64 - ib as f64 / nb as f64).abs());
    }
    d
}

fn ks_coefficient(alpha: f64) -> f64 {
    // c(alpha) = sqrt(-ln(alpha/2) / 2), the asymptotic Kolmogorov value.
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Asymptotic critical value of the one-sample KS statistic.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    ks_coefficient(alpha) / (n as f64).sqrt()
}

/// Asymptotic critical value of the two-sample KS statistic.
pub fn ks_critical_two_sample(n: usize, m: usize, alpha: f64) -> f64 {
    ks_coefficient(alpha) * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Pearson chi-square statistic of observed counts against expected
/// proportions (cells with zero expectation are skipped).
pub fn chi2_statistic(observed: &[u64], expected_props: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected_props.len());
    let total: u64 = observed.iter().sum();
    let mut stat = 0.0;
    for (&o, &p) in observed.iter().zip(expected_props) {
        let e = p * total as f64;
        if e > 0.0 {
            stat += (o as f64 - e) * (o as f64 - e) / e;
        }
    }
    stat
}

/// Upper 1% critical values of the chi-square distribution for small
/// degrees of freedom.
pub fn chi2_critical_p01(df: usize) -> f64 {
    const TABLE: [f64; 12] = [
        6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090, 21.666, 23.209, 24.725,
        26.217,
    ];
    assert!((1..=TABLE.len()).contains(&df), "df {df} not tabulated");
    TABLE[df - 1]
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        // Average ranks over ties.
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    num / (dx * dy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn ks_accepts_matching_exponential() {
        let mut rng = SplitMix64::new(1);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.exponential(0.5)).collect();
        let d = ks_statistic_cdf(&xs, |x| 1.0 - (-0.5 * x).exp());
        assert!(d < ks_critical(xs.len(), 0.01), "d {d}");
    }

    #[test]
    fn ks_rejects_wrong_rate() {
        let mut rng = SplitMix64::new(2);
        let xs: Vec<f64> = (0..50_000).map(|_| rng.exponential(0.6)).collect();
        let d = ks_statistic_cdf(&xs, |x| 1.0 - (-0.5 * x).exp());
        assert!(d > ks_critical(xs.len(), 0.01), "d {d}");
    }

    #[test]
    fn two_sample_ks_on_identical_sets_is_zero() {
        let xs = vec![1.0, 2.0, 3.0];
        assert_eq!(ks_statistic_two_sample(&xs, &xs), 0.0);
    }

    #[test]
    fn two_sample_ks_detects_shift() {
        let mut rng = SplitMix64::new(3);
        let a: Vec<f64> = (0..20_000).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = (0..20_000).map(|_| rng.next_f64() + 0.2).collect();
        let d = ks_statistic_two_sample(&a, &b);
        assert!(d > ks_critical_two_sample(a.len(), b.len(), 0.01));
    }

    #[test]
    fn chi2_statistic_zero_for_exact_match() {
        let obs = [25u64, 75];
        let stat = chi2_statistic(&obs, &[0.25, 0.75]);
        assert!(stat.abs() < 1e-12);
    }

    #[test]
    fn spearman_detects_monotone_trends() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 8.0, 5.0, 1.0];
        assert!((spearman_rho(&xs, &ys) + 1.0).abs() < 1e-12);
        let zs = [0.1, 0.4, 0.45, 0.9];
        assert!((spearman_rho(&xs, &zs) - 1.0).abs() < 1e-12);
    }
}
