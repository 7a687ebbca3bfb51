//! Adam training loop with warmup/cosine schedule, global-norm clipping,
//! divergence detection, and finite-difference gradient checks.

use super::net::{loss_and_grad, sequence_loss, Grads, LossParts};
use super::{ModelParams, TokenSequence};
use crate::rng::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training loss diverged (non-finite) at epoch {epoch}")]
    Divergence {
        epoch: usize,
        /// Last parameters that still produced a finite loss.
        last_good: Box<ModelParams>,
    },
    #[error("empty training set")]
    EmptyDataset,
}

/// Optimizer settings. The defaults are the published recipe: Adam at
/// peak rate 5e-4 with weight decay 1e-5, batches of 32, gradients
/// clipped to global norm 1, a 30-epoch linear warmup from 1e-7 and
/// cosine decay to 5e-6 afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub lr: f64,
    pub lr_warmup_start: f64,
    pub lr_final: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_warmup_start: 1e-7,
            lr_final: 5e-6,
            warmup_epochs: 30,
            epochs: 100,
            weight_decay: 1e-5,
            batch_size: 32,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

/// Learning rate at the start of an epoch: linear warmup to the peak at
/// `warmup_epochs`, then cosine decay to `lr_final` at the last epoch.
pub fn lr_at_epoch(opt: &OptConfig, epoch: usize) -> f64 {
    if epoch <= opt.warmup_epochs && opt.warmup_epochs > 0 {
        let frac = epoch as f64 / opt.warmup_epochs as f64;
        opt.lr_warmup_start + (opt.lr - opt.lr_warmup_start) * frac
    } else if epoch >= opt.epochs {
        opt.lr_final
    } else {
        let span = (opt.epochs - opt.warmup_epochs).max(1) as f64;
        let frac = (epoch - opt.warmup_epochs) as f64 / span;
        opt.lr_final
            + (opt.lr - opt.lr_final) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        Self {
            m: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
            v: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
            step: 0,
        }
    }

    /// Coupled L2 weight decay (applied to the gradient before the
    /// moment updates), matching the reference Adam implementation.
    fn update(&mut self, params: &mut ModelParams, grads: &Grads, lr: f64, wd: f64) {
        self.step += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.step as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.step as i32);
        for (ti, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.at(ti);
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for (k, p) in tensor.data.iter_mut().enumerate() {
                let gk = g[k] + wd * *p;
                m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * gk;
                v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Mean of the per-sequence training objectives (used both as the batch
/// objective and for reported train/validation losses).
pub fn mean_total(params: &ModelParams, seqs: &[TokenSequence]) -> f64 {
    let totals: Vec<f64> = seqs
        .par_iter()
        .map(|s| sequence_loss(params, s).total())
        .collect();
    totals.iter().sum::<f64>() / totals.len().max(1) as f64
}

/// Batch gradient: the mean of per-sequence gradients, reduced in
/// sequence order for determinism.
fn batch_grad(params: &ModelParams, batch: &[&TokenSequence]) -> (f64, Grads) {
    let results: Vec<(LossParts, Grads)> = batch
        .par_iter()
        .map(|s| loss_and_grad(params, s))
        .collect();
    let mut total_grads = Grads::zeros(params);
    let mut loss_sum = 0.0;
    for (parts, g) in &results {
        loss_sum += parts.total();
        total_grads.add(g);
    }
    let inv = 1.0 / batch.len() as f64;
    total_grads.scale(inv);
    (loss_sum * inv, total_grads)
}

/// Train from the given initial parameters. Shuffling, batching and the
/// optimizer are all deterministic functions of the optimizer seed.
pub fn train(
    init: ModelParams,
    train_set: &[TokenSequence],
    val_set: &[TokenSequence],
    opt: &OptConfig,
) -> Result<TrainReport, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init;
    let mut adam = Adam::new(&params);
    let mut last_good = params.clone();
    let mut train_hist = Vec::with_capacity(opt.epochs);
    let mut val_hist = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        let lr = lr_at_epoch(opt, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = SplitMix64::stream(opt.seed, epoch as u64);
        shuffle_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_grad(&params, &batch);
            if !loss.is_finite() || !grads.is_finite() {
                log::error!("divergence at epoch {epoch}: batch loss {loss}");
                return Err(TrainError::Divergence {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            let norm = grads.global_norm();
            if norm > opt.clip_norm {
                grads.scale(opt.clip_norm / norm);
            }
            adam.update(&mut params, &grads, lr, opt.weight_decay);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        if !params.all_finite() {
            return Err(TrainError::Divergence {
                epoch,
                last_good: Box::new(last_good),
            });
        }
        last_good = params.clone();
        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            mean_total(&params, val_set)
        };
        log::info!("epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5}");
        train_hist.push(train_loss);
        val_hist.push(val_loss);
    }

    Ok(TrainReport {
        params,
        train_loss: train_hist,
        val_loss: val_hist,
    })
}

/// Max relative error between an analytic gradient and central finite
/// differences of `f` along the listed coordinates.
pub fn max_rel_err_fd<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    flat: &mut [f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &c in coords {
        let orig = flat[c];
        flat[c] = orig + h;
        let up = f(flat);
        flat[c] = orig - h;
        let down = f(flat);
        flat[c] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(analytic[c].abs());
        if denom < 1e-10 {
            continue;
        }
        worst = worst.max((fd - analytic[c]).abs() / denom);
    }
    worst
}

/// Finite-difference check of the full model gradient on a small batch:
/// returns the max relative error over `n_coords` randomly sampled
/// parameter coordinates (central differences, the given step).
pub fn grad_check_model(
    params: &ModelParams,
    seqs: &[TokenSequence],
    n_coords: usize,
    h: f64,
    seed: u64,
) -> f64 {
    let inv = 1.0 / seqs.len() as f64;
    let mut analytic = Grads::zeros(params);
    for s in seqs {
        let (_, g) = loss_and_grad(params, s);
        analytic.add(&g);
    }
    analytic.scale(inv);
    let flat_analytic = analytic.flat();

    // Map flat coordinates back to (tensor, offset).
    let mut spans = Vec::new();
    let mut offset = 0usize;
    for t in params.tensors() {
        spans.push((offset, t.data.len()));
        offset += t.data.len();
    }
    let total = offset;
    let mut rng = SplitMix64::new(seed);
    let mut coords: Vec<usize> = (0..n_coords).map(|_| rng.below(total)).collect();
    coords.sort_unstable();
    coords.dedup();

    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for &c in &coords {
        let ti = spans.partition_point(|&(start, _)| start <= c) - 1;
        let k = c - spans[ti].0;
        let orig = work.tensors()[ti].data[k];
        work.tensors_mut()[ti].data[k] = orig + h;
        let up: f64 = seqs.iter().map(|s| sequence_loss(&work, s).total()).sum::<f64>() * inv;
        work.tensors_mut()[ti].data[k] = orig - h;
        let down: f64 = seqs.iter().map(|s| sequence_loss(&work, s).total()).sum::<f64>() * inv;
        work.tensors_mut()[ti].data[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = fd.abs().max(flat_analytic[c].abs());
        if denom < 1e-10 {
            continue;
        }
        worst = worst.max((fd - flat_analytic[c]).abs() / denom);
    }
    worst
}
