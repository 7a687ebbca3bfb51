//! A linear reference model for validating the gradient machinery.
//!
//! Embedding lookup, a linear readout, and a squared-error loss: every
//! parameter enters the prediction linearly, so the loss is quadratic
//! along each coordinate and a central finite difference is exact up to
//! rounding. This pins the gradient-check harness itself before it is
//! pointed at the transformer.

use crate::rng::SplitMix64;

/// Tokens -> embedding -> linear readout -> squared error.
#[derive(Debug, Clone)]
pub struct LinearToy {
    pub vocab: usize,
    pub dim: usize,
    /// Flat parameters: `vocab x dim` embedding, then `dim` readout
    /// weights, then one bias.
    pub params: Vec<f64>,
}

impl LinearToy {
    pub fn init(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let params = (0..vocab * dim + dim + 1)
            .map(|_| 0.2 * rng.normal())
            .collect();
        Self { vocab, dim, params }
    }

    fn split(params: &[f64], vocab: usize, dim: usize) -> (&[f64], &[f64], f64) {
        let (emb, rest) = params.split_at(vocab * dim);
        let (w, b) = rest.split_at(dim);
        (emb, w, b[0])
    }

    pub fn loss_at(&self, params: &[f64], tokens: &[usize], targets: &[f64]) -> f64 {
        let (emb, w, b) = Self::split(params, self.vocab, self.dim);
        tokens
            .iter()
            .zip(targets)
            .map(|(&tok, &y)| {
                let row = &emb[tok * self.dim..(tok + 1) * self.dim];
                let pred = row.iter().zip(w).map(|(e, wv)| e * wv).sum::<f64>() + b;
                (pred - y) * (pred - y)
            })
            .sum()
    }

    pub fn loss(&self, tokens: &[usize], targets: &[f64]) -> f64 {
        self.loss_at(&self.params, tokens, targets)
    }

    pub fn grad(&self, tokens: &[usize], targets: &[f64]) -> Vec<f64> {
        let (emb, w, b) = Self::split(&self.params, self.vocab, self.dim);
        let mut g = vec![0.0; self.params.len()];
        let (gemb, grest) = g.split_at_mut(self.vocab * self.dim);
        let (gw, gb) = grest.split_at_mut(self.dim);
        for (&tok, &y) in tokens.iter().zip(targets) {
            let row = &emb[tok * self.dim..(tok + 1) * self.dim];
            let pred = row.iter().zip(w).map(|(e, wv)| e * wv).sum::<f64>() + b;
            let r = 2.0 * (pred - y);
            for k in 0..self.dim {
                gemb[tok * self.dim + k] += r * w[k];
                gw[k] += r * row[k];
            }
            gb[0] += r;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::train::max_rel_err_fd;

    #[test]
    fn gradient_exact_under_central_differences() {
        let toy = LinearToy::init(5, 4, 3);
        let mut rng = SplitMix64::new(7);
        let tokens: Vec<usize> = (0..40).map(|_| rng.below(5)).collect();
        let targets: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let analytic = toy.grad(&tokens, &targets);
        // No near-zero coordinates for this seed, so relative errors are
        // meaningful everywhere.
        let min_g = analytic.iter().map(|g| g.abs()).fold(f64::INFINITY, f64::min);
        assert!(min_g > 1e-3, "degenerate gradient coordinate {min_g}");
        let mut flat = toy.params.clone();
        let coords: Vec<usize> = (0..flat.len()).collect();
        // The loss is quadratic along every coordinate, so the central
        // difference is exact for any step; a large step keeps the f64
        // cancellation error negligible.
        let err = max_rel_err_fd(
            |p| toy.loss_at(p, &tokens, &targets),
            &mut flat,
            &analytic,
            &coords,
            0.25,
        );
        assert!(err < 1e-10, "max relative error {err}");
    }
}
