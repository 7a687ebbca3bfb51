//! SplitMix64 pseudo-random numbers with deterministic stream splitting.
//!
//! All randomness in this crate flows through [`SplitMix64`] (Sebastiano
//! Vigna's mixer, the core of `java.util.SplittableRandom`). It is chosen
//! for cross-platform reproducibility: the same `(seed, stream)` pair
//! yields the same draws on every platform, and child streams for
//! per-trajectory or per-replica work are derived by hashing
//! `(seed, index)` rather than by jumping a shared sequence.
//!
//! Continuous draws use inverse-CDF sampling (exponential, uniform) so
//! one variate consumes exactly one `u64`, keeping streams easy to
//! reason about; normals use Box-Muller and consume two.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator. Non-cryptographic.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Child stream `index` of a master seed. Streams are independent for
    /// practical purposes: the state is the mix of the master seed and a
    /// golden-ratio multiple of the (index + 1).
    pub fn stream(master_seed: u64, index: u64) -> Self {
        let salt = GOLDEN_GAMMA.wrapping_mul(index.wrapping_add(1));
        Self {
            state: mix64(master_seed ^ salt).wrapping_add(salt),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 / DEN
    }

    /// Uniform in (0, 1]; safe to pass to `ln`.
    #[inline]
    pub fn next_f64_open(&mut self) -> f64 {
        const DEN: f64 = (1u64 << 53) as f64;
        ((self.next_u64() >> 11) + 1) as f64 / DEN
    }

    /// Uniform in [a, b).
    #[inline]
    pub fn uniform(&mut self, a: f64, b: f64) -> f64 {
        a + (b - a) * self.next_f64()
    }

    /// Exponential with the given rate, by inverse CDF.
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        -self.next_f64_open().ln() / rate
    }

    /// Standard normal via Box-Muller (consumes two u64s).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Index drawn with probability `weights[i] / sum(weights)`.
    /// Weights must be nonnegative with a positive sum.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let u = self.next_f64() * total;
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Uniform integer in [0, n).
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is negligible for the n used here (n << 2^64).
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_sequence() {
        let mut a = SplitMix64::new(7);
        let mut b = SplitMix64::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = SplitMix64::stream(42, 0);
        let mut b = SplitMix64::stream(42, 1);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn exponential_mean() {
        let mut rng = SplitMix64::new(1);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| rng.exponential(2.0)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_range() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..1000 {
            let x = rng.uniform(1.5, 2.5);
            assert!((1.5..2.5).contains(&x));
        }
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = SplitMix64::new(9);
        let w = [1.0, 3.0];
        let n = 100_000;
        let ones = (0..n).filter(|_| rng.categorical(&w) == 1).count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.01, "frac {frac}");
    }
}
