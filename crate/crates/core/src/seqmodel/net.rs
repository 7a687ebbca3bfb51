//! Forward pass, loss, and hand-written reverse-mode gradients for the
//! decoder stack (pre-norm blocks, tanh-GELU feed-forward, causal
//! attention). All math is 64-bit; per-sequence gradients are exact and
//! finite-difference-checkable.

use super::encoding::{positional_encoding, Token, TokenSequence};
use super::{none_class_row, ModelParams, TimeHeadKind};
use crate::timedist::{exp_head_nll, exp_head_nll_grad, exp_head_rate, time_sq_metric};
use ndarray::{s, Array1, Array2};
use rayon::prelude::*;

const LN_EPS: f64 = 1e-5;
/// Large negative logit used for masked attention entries; exp of the
/// shifted value underflows to exactly zero.
const NEG_INF: f64 = -1e30;

/// Gradient store parallel to `ModelParams::tensors()`.
#[derive(Debug, Clone)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(params: &ModelParams) -> Self {
        Self {
            data: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn at(&self, idx: usize) -> &[f64] {
        &self.data[idx]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx]
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.data {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Flat concatenation in tensor order (finite-difference checks).
    pub fn flat(&self) -> Vec<f64> {
        self.data.iter().flat_map(|t| t.iter().copied()).collect()
    }
}

/// Per-sequence loss sums. `total()` is the training objective: the sum
/// of the three negative log-likelihood heads averaged per event.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub event_nll: f64,
    pub class_nll: f64,
    pub time_nll: f64,
    /// Squared-error time metric (evaluation only, not trained).
    pub time_sq: f64,
    pub n_events: usize,
    pub n_class_targets: usize,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        (self.event_nll + self.class_nll + self.time_nll) / self.n_events.max(1) as f64
    }

    pub fn event_mean(&self) -> f64 {
        self.event_nll / self.n_events.max(1) as f64
    }

    /// Class loss averaged over all events (non-class-bearing events
    /// contribute zero), matching the oracle convention.
    pub fn class_mean(&self) -> f64 {
        self.class_nll / self.n_events.max(1) as f64
    }

    pub fn time_nll_mean(&self) -> f64 {
        self.time_nll / self.n_events.max(1) as f64
    }

    pub fn time_sq_mean(&self) -> f64 {
        self.time_sq / self.n_events.max(1) as f64
    }

    pub fn merge(&mut self, other: &LossParts) {
        self.event_nll += other.event_nll;
        self.class_nll += other.class_nll;
        self.time_nll += other.time_nll;
        self.time_sq += other.time_sq;
        self.n_events += other.n_events;
        self.n_class_targets += other.n_class_targets;
    }
}

fn layer_norm_fwd(x: &Array2<f64>, gamma: &[f64], beta: &[f64]) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let (t, d) = x.dim();
    let mut y = Array2::zeros((t, d));
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = vec![0.0; t];
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for k in 0..d {
            let xh = (x[[i, k]] - mean) * r;
            xhat[[i, k]] = xh;
            y[[i, k]] = gamma[k] * xh + beta[k];
        }
    }
    (y, xhat, rstd)
}

fn layer_norm_bwd(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    rstd: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for k in 0..d {
            let g = dy[[i, k]] * gamma[k];
            sum_g += g;
            sum_gx += g * xhat[[i, k]];
            dgamma[k] += dy[[i, k]] * xhat[[i, k]];
            dbeta[k] += dy[[i, k]];
        }
        let mg = sum_g / d as f64;
        let mgx = sum_gx / d as f64;
        for k in 0..d {
            let g = dy[[i, k]] * gamma[k];
            dx[[i, k]] = (g - mg - xhat[[i, k]] * mgx) * rstd[i];
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
fn add_bias(x: &mut Array2<f64>, b: &[f64]) {
    for mut row in x.rows_mut() {
        for (v, bi) in row.iter_mut().zip(b) {
            *v += bi;
        }
    }
}

struct LayerCache {
    ln1_xhat: Array2<f64>,
    ln1_rstd: Vec<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_rstd: Vec<f64>,
    h1: Array2<f64>,
    act: Array2<f64>,
}

struct ForwardCache {
    policy_h1: Option<Array1<f64>>,
    layers: Vec<LayerCache>,
    lnf_xhat: Array2<f64>,
    lnf_rstd: Vec<f64>,
    hidden: Array2<f64>,
}

fn embed(params: &ModelParams, seq: &TokenSequence) -> (Array2<f64>, Option<Array1<f64>>) {
    let cfg = &params.config;
    let d = cfg.d_model;
    let t = seq.len();
    // Token embeddings are scaled by sqrt(d) so they stay commensurate
    // with the unit-amplitude sinusoidal positional encoding.
    let mut x = Array2::zeros((t, d));
    let mut policy_h1 = None;

    for (i, tok) in seq.tokens.iter().enumerate() {
        match tok {
            Token::State => {
                let w = params.get("state_proj_w");
                let b = params.get("state_proj_b");
                for (fi, &f) in seq.state_features.iter().enumerate() {
                    if f != 0.0 {
                        let wrow = w.row(fi);
                        for k in 0..d {
                            x[[i, k]] += f * wrow[k];
                        }
                    }
                }
                for k in 0..d {
                    x[[i, k]] += b.row(0)[k];
                }
            }
            Token::Policy => {
                let (c, n) = seq.policy.expect("policy token requires policy values");
                let w1 = params.get("policy_c_w1");
                let b1 = params.get("policy_c_b1");
                let w2 = params.get("policy_c_w2");
                let b2 = params.get("policy_c_b2");
                let mut h1 = Array1::zeros(d);
                for k in 0..d {
                    h1[k] = c * w1.row(0)[k] + b1.row(0)[k];
                }
                for k in 0..d {
                    let a = h1[k].max(0.0);
                    if a != 0.0 {
                        let wrow = w2.row(k);
                        for m in 0..d {
                            x[[i, m]] += a * wrow[m];
                        }
                    }
                }
                let nemb = params.get("policy_n_emb");
                let nrow = nemb.row(n.min(cfg.policy_n_max));
                for k in 0..d {
                    x[[i, k]] += b2.row(0)[k] + nrow[k];
                }
                policy_h1 = Some(h1);
            }
            Token::Time(dt) => match cfg.time_head {
                TimeHeadKind::Exponential => {
                    let w = params.get("time2vec_w").row(0);
                    let b = params.get("time2vec_b").row(0);
                    x[[i, 0]] += w[0] * dt + b[0];
                    for k in 1..d {
                        x[[i, k]] += (w[k] * dt + b[k]).sin();
                    }
                }
                TimeHeadKind::Riemann {
                    width,
                    bins,
                    ..
                } => {
                    let bin = ((dt / width).floor() as usize).min(bins - 1);
                    let row = params.get("time_bin_emb").row(bin);
                    for k in 0..d {
                        x[[i, k]] += row[k];
                    }
                }
            },
            Token::Event(e) => {
                let row = params.get("event_emb").row(*e);
                for k in 0..d {
                    x[[i, k]] += row[k];
                }
            }
            Token::Class(c) => {
                let row_idx = c.unwrap_or(none_class_row(cfg));
                let row = params.get("class_emb").row(row_idx);
                for k in 0..d {
                    x[[i, k]] += row[k];
                }
            }
        }
    }
    x *= (d as f64).sqrt();
    x += &positional_encoding(t, cfg);
    (x, policy_h1)
}

fn forward(params: &ModelParams, seq: &TokenSequence) -> ForwardCache {
    let cfg = &params.config;
    let (d, heads) = (cfg.d_model, cfg.n_heads);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut x, policy_h1) = embed(params, seq);
    let t = seq.len();
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let (a, ln1_xhat, ln1_rstd) = layer_norm_fwd(
            &x,
            &params.get(&format!("l{l}_ln1_g")).data,
            &params.get(&format!("l{l}_ln1_b")).data,
        );
        let mut qkv = a.dot(&params.get(&format!("l{l}_qkv_w")).view());
        add_bias(&mut qkv, &params.get(&format!("l{l}_qkv_b")).data);
        let q = qkv.slice(s![.., 0..d]).to_owned();
        let k = qkv.slice(s![.., d..2 * d]).to_owned();
        let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();

        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
            let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
            let vh = v.slice(s![.., h * dh..(h + 1) * dh]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            for i in 0..t {
                for j in (i + 1)..t {
                    scores[[i, j]] = NEG_INF;
                }
            }
            // Row softmax.
            for i in 0..t {
                let mut row = scores.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for vv in row.iter_mut() {
                    *vv = (*vv - max).exp();
                    sum += *vv;
                }
                for vv in row.iter_mut() {
                    *vv /= sum;
                }
            }
            let ch = scores.dot(&vh);
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ch);
            probs.push(scores);
        }
        let mut att = ctx.dot(&params.get(&format!("l{l}_proj_w")).view());
        add_bias(&mut att, &params.get(&format!("l{l}_proj_b")).data);
        let x_mid = &x + &att;

        let (m, ln2_xhat, ln2_rstd) = layer_norm_fwd(
            &x_mid,
            &params.get(&format!("l{l}_ln2_g")).data,
            &params.get(&format!("l{l}_ln2_b")).data,
        );
        let mut h1 = m.dot(&params.get(&format!("l{l}_fc1_w")).view());
        add_bias(&mut h1, &params.get(&format!("l{l}_fc1_b")).data);
        let act = h1.mapv(gelu);
        let mut mlp = act.dot(&params.get(&format!("l{l}_fc2_w")).view());
        add_bias(&mut mlp, &params.get(&format!("l{l}_fc2_b")).data);
        x = &x_mid + &mlp;

        layers.push(LayerCache {
            ln1_xhat,
            ln1_rstd,
            q,
            k,
            v,
            probs,
            ctx,
            ln2_xhat,
            ln2_rstd,
            h1,
            act,
        });
    }

    let (hidden, lnf_xhat, lnf_rstd) = layer_norm_fwd(
        &x,
        &params.get("lnf_g").data,
        &params.get("lnf_b").data,
    );
    ForwardCache {
        policy_h1,
        layers,
        lnf_xhat,
        lnf_rstd,
        hidden,
    }
}

/// Final hidden states at every position (teacher-forced evaluation and
/// causality tests).
pub fn hidden_states(params: &ModelParams, seq: &TokenSequence) -> Array2<f64> {
    forward(params, seq).hidden
}

fn log_softmax_nll(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    let nll = -(probs[target].max(f64::MIN_POSITIVE)).ln();
    (nll, probs)
}

fn head_losses(
    params: &ModelParams,
    seq: &TokenSequence,
    hidden: &Array2<f64>,
    mut dhidden: Option<&mut Array2<f64>>,
    grads: Option<&mut Grads>,
) -> LossParts {
    let cfg = &params.config;
    let d = cfg.d_model;
    let inv_n = 1.0 / seq.n_events.max(1) as f64;
    let mut parts = LossParts {
        n_events: seq.n_events,
        n_class_targets: seq.class_targets.len(),
        ..Default::default()
    };

    // Collect per-head gradients densely, then push through the shared
    // head weights in one pass per head.
    struct HeadAcc {
        rows: Vec<usize>,
        dlogits: Vec<Vec<f64>>,
    }
    let mut event_acc = HeadAcc {
        rows: Vec::new(),
        dlogits: Vec::new(),
    };
    let mut class_acc = HeadAcc {
        rows: Vec::new(),
        dlogits: Vec::new(),
    };
    let mut time_acc = HeadAcc {
        rows: Vec::new(),
        dlogits: Vec::new(),
    };
    let want_grad = dhidden.is_some();

    let ev_w = params.get("event_head_w");
    let ev_b = params.get("event_head_b");
    for &(pos, target) in &seq.event_targets {
        let h = hidden.row(pos);
        let mut logits = ev_b.data.clone();
        for r in 0..d {
            let hv = h[r];
            let wrow = ev_w.row(r);
            for (lg, wv) in logits.iter_mut().zip(wrow) {
                *lg += hv * wv;
            }
        }
        let (nll, mut probs) = log_softmax_nll(&logits, target);
        parts.event_nll += nll;
        if want_grad {
            probs[target] -= 1.0;
            for p in &mut probs {
                *p *= inv_n;
            }
            event_acc.rows.push(pos);
            event_acc.dlogits.push(probs);
        }
    }

    if cfg.n_classes > 1 {
        let cl_w = params.get("class_head_w");
        let cl_b = params.get("class_head_b");
        for &(pos, target) in &seq.class_targets {
            let h = hidden.row(pos);
            let mut logits = cl_b.data.clone();
            for r in 0..d {
                let hv = h[r];
                let wrow = cl_w.row(r);
                for (lg, wv) in logits.iter_mut().zip(wrow) {
                    *lg += hv * wv;
                }
            }
            let (nll, mut probs) = log_softmax_nll(&logits, target);
            parts.class_nll += nll;
            if want_grad {
                probs[target] -= 1.0;
                for p in &mut probs {
                    *p *= inv_n;
                }
                class_acc.rows.push(pos);
                class_acc.dlogits.push(probs);
            }
        }
    }

    let tm_w = params.get("time_head_w");
    let tm_b = params.get("time_head_b");
    match cfg.time_head {
        TimeHeadKind::Exponential => {
            for &(pos, dt) in &seq.time_targets {
                let h = hidden.row(pos);
                let mut raw = tm_b.data[0];
                for r in 0..d {
                    raw += h[r] * tm_w.data[r];
                }
                parts.time_nll += exp_head_nll(raw, dt);
                parts.time_sq += time_sq_metric(exp_head_rate(raw), dt);
                if want_grad {
                    time_acc.rows.push(pos);
                    time_acc
                        .dlogits
                        .push(vec![exp_head_nll_grad(raw, dt) * inv_n]);
                }
            }
        }
        TimeHeadKind::Riemann { width, bins, tail_scale } => {
            let tail = tail_scale.unwrap_or(width);
            let edge = (bins - 1) as f64 * width;
            for &(pos, dt) in &seq.time_targets {
                let h = hidden.row(pos);
                let mut logits = tm_b.data.clone();
                for r in 0..d {
                    let hv = h[r];
                    let wrow = tm_w.row(r);
                    for (lg, wv) in logits.iter_mut().zip(wrow) {
                        *lg += hv * wv;
                    }
                }
                let bin = ((dt / width).floor() as usize).min(bins - 1);
                let (nll_bin, mut probs) = log_softmax_nll(&logits, bin);
                // Density correction: uniform inside a bin, half-normal
                // overhang in the tail. These terms have no logit grad.
                let nll = if bin + 1 < bins {
                    nll_bin + width.ln()
                } else {
                    let over = dt - edge;
                    nll_bin
                        - (0.5 * (2.0 / std::f64::consts::PI).ln()
                            - tail.ln()
                            - over * over / (2.0 * tail * tail))
                };
                parts.time_nll += nll;
                // Squared-error metric against the head's mean time.
                let mean = {
                    let mut m = 0.0;
                    for (k, &p) in probs.iter().enumerate() {
                        m += if k + 1 < bins {
                            p * (k as f64 + 0.5) * width
                        } else {
                            p * (edge + tail * (2.0 / std::f64::consts::PI).sqrt())
                        };
                    }
                    m
                };
                let dterr = mean - dt;
                parts.time_sq += dterr * dterr;
                if want_grad {
                    probs[bin] -= 1.0;
                    for p in &mut probs {
                        *p *= inv_n;
                    }
                    time_acc.rows.push(pos);
                    time_acc.dlogits.push(probs);
                }
            }
        }
    }

    if let (Some(dh), Some(grads)) = (dhidden.as_deref_mut(), grads) {
        let mut apply = |acc: &HeadAcc, w_name: &str, b_name: &str| {
            if acc.rows.is_empty() {
                return;
            }
            let w = params.get(w_name);
            let wi = params.tensor_index(w_name);
            let bi = params.tensor_index(b_name);
            let out = w.cols;
            for (ri, &pos) in acc.rows.iter().enumerate() {
                let dl = &acc.dlogits[ri];
                {
                    let db = grads.at_mut(bi);
                    for (o, &g) in dl.iter().enumerate() {
                        db[o] += g;
                    }
                }
                let h = hidden.row(pos);
                let dw = grads.at_mut(wi);
                for r in 0..d {
                    let hv = h[r];
                    let wrow = w.row(r);
                    let mut acc_dh = 0.0;
                    for o in 0..out {
                        dw[r * out + o] += hv * dl[o];
                        acc_dh += wrow[o] * dl[o];
                    }
                    dh[[pos, r]] += acc_dh;
                }
            }
        };
        apply(&event_acc, "event_head_w", "event_head_b");
        if cfg.n_classes > 1 {
            apply(&class_acc, "class_head_w", "class_head_b");
        }
        apply(&time_acc, "time_head_w", "time_head_b");
    }
    parts
}

/// Teacher-forced loss of one sequence (no gradients).
pub fn sequence_loss(params: &ModelParams, seq: &TokenSequence) -> LossParts {
    let cache = forward(params, seq);
    head_losses(params, seq, &cache.hidden, None, None)
}

/// Per-step losses of one sequence in event order: `(event_nll,
/// class_nll, time_nll, time_sq)` per event. Class entries are zero for
/// events without a class target.
pub fn sequence_step_losses(
    params: &ModelParams,
    seq: &TokenSequence,
) -> Vec<(f64, f64, f64, f64)> {
    let cfg = &params.config;
    let hidden = forward(params, seq).hidden;
    let mut steps = vec![(0.0, 0.0, 0.0, 0.0); seq.n_events];
    let period = cfg.period();
    let prefix = cfg.prefix_len();
    let step_of = |pos: usize| (pos + 1 - prefix) / period.max(1);

    let ev_w = params.get("event_head_w");
    let ev_b = params.get("event_head_b");
    for &(pos, target) in &seq.event_targets {
        let logits = row_linear(hidden.row(pos), ev_w, ev_b);
        steps[step_of(pos)].0 = log_softmax_nll(&logits, target).0;
    }
    if cfg.n_classes > 1 {
        let cl_w = params.get("class_head_w");
        let cl_b = params.get("class_head_b");
        for &(pos, target) in &seq.class_targets {
            let logits = row_linear(hidden.row(pos), cl_w, cl_b);
            steps[step_of(pos)].1 = log_softmax_nll(&logits, target).0;
        }
    }
    let tm_w = params.get("time_head_w");
    let tm_b = params.get("time_head_b");
    for &(pos, dt) in &seq.time_targets {
        let raws = row_linear(hidden.row(pos), tm_w, tm_b);
        let idx = step_of(pos);
        match cfg.time_head {
            TimeHeadKind::Exponential => {
                steps[idx].2 = exp_head_nll(raws[0], dt);
                steps[idx].3 = time_sq_metric(exp_head_rate(raws[0]), dt);
            }
            TimeHeadKind::Riemann { width, bins, tail_scale } => {
                let tail = tail_scale.unwrap_or(width);
                let edge = (bins - 1) as f64 * width;
                let bin = ((dt / width).floor() as usize).min(bins - 1);
                let (nll_bin, probs) = log_softmax_nll(&raws, bin);
                steps[idx].2 = if bin + 1 < bins {
                    nll_bin + width.ln()
                } else {
                    let over = dt - edge;
                    nll_bin
                        - (0.5 * (2.0 / std::f64::consts::PI).ln()
                            - tail.ln()
                            - over * over / (2.0 * tail * tail))
                };
                let mut mean = 0.0;
                for (k, &p) in probs.iter().enumerate() {
                    mean += if k + 1 < bins {
                        p * (k as f64 + 0.5) * width
                    } else {
                        p * (edge + tail * (2.0 / std::f64::consts::PI).sqrt())
                    };
                }
                steps[idx].3 = (mean - dt) * (mean - dt);
            }
        }
    }
    steps
}

fn row_linear(
    h: ndarray::ArrayView1<'_, f64>,
    w: &super::Tensor,
    b: &super::Tensor,
) -> Vec<f64> {
    let mut out = b.data.clone();
    for (r, &hv) in h.iter().enumerate() {
        let wrow = w.row(r);
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += hv * wv;
        }
    }
    out
}

/// Mean per-sequence losses over a set (parallel, deterministic sums).
pub fn batch_loss(params: &ModelParams, seqs: &[TokenSequence]) -> LossParts {
    let parts: Vec<LossParts> = seqs
        .par_iter()
        .map(|s| sequence_loss(params, s))
        .collect();
    let mut total = LossParts::default();
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Loss and parameter gradients of one sequence. The objective is
/// `LossParts::total()`, the per-event mean of the three NLL heads.
pub fn loss_and_grad(params: &ModelParams, seq: &TokenSequence) -> (LossParts, Grads) {
    let cfg = &params.config;
    let (d, heads, f) = (cfg.d_model, cfg.n_heads, cfg.d_hidden);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = seq.len();
    let cache = forward(params, seq);
    let mut grads = Grads::zeros(params);
    let mut dhidden = Array2::zeros((t, d));
    let parts = head_losses(
        params,
        seq,
        &cache.hidden,
        Some(&mut dhidden),
        Some(&mut grads),
    );

    // Final layer norm.
    let mut dx = {
        let gi = params.tensor_index("lnf_g");
        let bi = params.tensor_index("lnf_b");
        let mut dg = vec![0.0; d];
        let mut db = vec![0.0; d];
        let dx = layer_norm_bwd(
            &dhidden,
            &cache.lnf_xhat,
            &cache.lnf_rstd,
            &params.get("lnf_g").data,
            &mut dg,
            &mut db,
        );
        grads.at_mut(gi).iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
        grads.at_mut(bi).iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        dx
    };

    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        // MLP backward: x = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
        let dmlp_out = dx.clone();
        let fc2_w = params.get(&format!("l{l}_fc2_w"));
        {
            let wi = params.tensor_index(&format!("l{l}_fc2_w"));
            let bi = params.tensor_index(&format!("l{l}_fc2_b"));
            let dw = lc.act.t().dot(&dmlp_out);
            let dwg = grads.at_mut(wi);
            for (a, b) in dwg.iter_mut().zip(dw.iter()) {
                *a += b;
            }
            let dbg = grads.at_mut(bi);
            for row in dmlp_out.rows() {
                for (a, b) in dbg.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let mut dact = dmlp_out.dot(&fc2_w.view().t());
        for i in 0..t {
            for k in 0..f {
                dact[[i, k]] *= gelu_grad(lc.h1[[i, k]]);
            }
        }
        let fc1_w = params.get(&format!("l{l}_fc1_w"));
        {
            let wi = params.tensor_index(&format!("l{l}_fc1_w"));
            let bi = params.tensor_index(&format!("l{l}_fc1_b"));
            let m = {
                // Recompute ln2 output row-wise from cached xhat.
                let g = &params.get(&format!("l{l}_ln2_g")).data;
                let b = &params.get(&format!("l{l}_ln2_b")).data;
                let mut m = lc.ln2_xhat.clone();
                for mut row in m.rows_mut() {
                    for k in 0..d {
                        row[k] = g[k] * row[k] + b[k];
                    }
                }
                m
            };
            let dw = m.t().dot(&dact);
            let dwg = grads.at_mut(wi);
            for (a, b) in dwg.iter_mut().zip(dw.iter()) {
                *a += b;
            }
            let dbg = grads.at_mut(bi);
            for row in dact.rows() {
                for (a, b) in dbg.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let dm = dact.dot(&fc1_w.view().t());
        let dx_mid_mlp = {
            let gi = params.tensor_index(&format!("l{l}_ln2_g"));
            let bi = params.tensor_index(&format!("l{l}_ln2_b"));
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let dxp = layer_norm_bwd(
                &dm,
                &lc.ln2_xhat,
                &lc.ln2_rstd,
                &params.get(&format!("l{l}_ln2_g")).data,
                &mut dg,
                &mut db,
            );
            grads.at_mut(gi).iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
            grads.at_mut(bi).iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            dxp
        };
        let dx_mid = &dx + &dx_mid_mlp;

        // Attention backward: x_mid = x_in + proj(ctx).
        let datt = dx_mid.clone();
        let proj_w = params.get(&format!("l{l}_proj_w"));
        {
            let wi = params.tensor_index(&format!("l{l}_proj_w"));
            let bi = params.tensor_index(&format!("l{l}_proj_b"));
            let dw = lc.ctx.t().dot(&datt);
            let dwg = grads.at_mut(wi);
            for (a, b) in dwg.iter_mut().zip(dw.iter()) {
                *a += b;
            }
            let dbg = grads.at_mut(bi);
            for row in datt.rows() {
                for (a, b) in dbg.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        let dctx = datt.dot(&proj_w.view().t());

        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dch = dctx.slice(cols).to_owned();
            let p = &lc.probs[h];
            let vh = lc.v.slice(cols);
            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            let dp = dch.dot(&vh.t());
            dv.slice_mut(cols).assign(&p.t().dot(&dch));
            // Softmax backward per row.
            let mut ds = Array2::zeros((t, t));
            for i in 0..t {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += dp[[i, j]] * p[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                }
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&kh));
            dk.slice_mut(cols).assign(&ds.t().dot(&qh));
        }
        let mut dqkv = Array2::zeros((t, 3 * d));
        dqkv.slice_mut(s![.., 0..d]).assign(&dq);
        dqkv.slice_mut(s![.., d..2 * d]).assign(&dk);
        dqkv.slice_mut(s![.., 2 * d..3 * d]).assign(&dv);
        let qkv_w = params.get(&format!("l{l}_qkv_w"));
        {
            let wi = params.tensor_index(&format!("l{l}_qkv_w"));
            let bi = params.tensor_index(&format!("l{l}_qkv_b"));
            let a = {
                let g = &params.get(&format!("l{l}_ln1_g")).data;
                let b = &params.get(&format!("l{l}_ln1_b")).data;
                let mut a = lc.ln1_xhat.clone();
                for mut row in a.rows_mut() {
                    for k in 0..d {
                        row[k] = g[k] * row[k] + b[k];
                    }
                }
                a
            };
            let dw = a.t().dot(&dqkv);
            let dwg = grads.at_mut(wi);
            for (x, y) in dwg.iter_mut().zip(dw.iter()) {
                *x += y;
            }
            let dbg = grads.at_mut(bi);
            for row in dqkv.rows() {
                for (x, y) in dbg.iter_mut().zip(row) {
                    *x += y;
                }
            }
        }
        let da = dqkv.dot(&qkv_w.view().t());
        let dx_in_attn = {
            let gi = params.tensor_index(&format!("l{l}_ln1_g"));
            let bi = params.tensor_index(&format!("l{l}_ln1_b"));
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            let dxp = layer_norm_bwd(
                &da,
                &lc.ln1_xhat,
                &lc.ln1_rstd,
                &params.get(&format!("l{l}_ln1_g")).data,
                &mut dg,
                &mut db,
            );
            grads.at_mut(gi).iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
            grads.at_mut(bi).iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            dxp
        };
        dx = &dx_mid + &dx_in_attn;
    }

    embed_backward(params, seq, &cache, &dx, &mut grads);
    (parts, grads)
}

fn embed_backward(
    params: &ModelParams,
    seq: &TokenSequence,
    cache: &ForwardCache,
    dx: &Array2<f64>,
    grads: &mut Grads,
) {
    let cfg = &params.config;
    let d = cfg.d_model;
    // Undo the sqrt(d) token-embedding scale once for all parameters.
    let dx = dx * (d as f64).sqrt();
    for (i, tok) in seq.tokens.iter().enumerate() {
        let drow = dx.row(i);
        match tok {
            Token::State => {
                let wi = params.tensor_index("state_proj_w");
                let bi = params.tensor_index("state_proj_b");
                {
                    let dw = grads.at_mut(wi);
                    for (fi, &fv) in seq.state_features.iter().enumerate() {
                        if fv != 0.0 {
                            for k in 0..d {
                                dw[fi * d + k] += fv * drow[k];
                            }
                        }
                    }
                }
                let db = grads.at_mut(bi);
                for k in 0..d {
                    db[k] += drow[k];
                }
            }
            Token::Policy => {
                let (c, n) = seq.policy.expect("policy token requires policy values");
                let h1 = cache.policy_h1.as_ref().expect("cached policy hidden");
                let w2 = params.get("policy_c_w2");
                let w2i = params.tensor_index("policy_c_w2");
                let b2i = params.tensor_index("policy_c_b2");
                let w1i = params.tensor_index("policy_c_w1");
                let b1i = params.tensor_index("policy_c_b1");
                let ni = params.tensor_index("policy_n_emb");
                let mut dh1 = vec![0.0; d];
                {
                    let dw2 = grads.at_mut(w2i);
                    for k in 0..d {
                        let a = h1[k].max(0.0);
                        let wrow = w2.row(k);
                        let mut acc = 0.0;
                        for m in 0..d {
                            if a != 0.0 {
                                dw2[k * d + m] += a * drow[m];
                            }
                            acc += wrow[m] * drow[m];
                        }
                        dh1[k] = if h1[k] > 0.0 { acc } else { 0.0 };
                    }
                }
                {
                    let db2 = grads.at_mut(b2i);
                    for k in 0..d {
                        db2[k] += drow[k];
                    }
                }
                {
                    let dw1 = grads.at_mut(w1i);
                    for k in 0..d {
                        dw1[k] += c * dh1[k];
                    }
                }
                {
                    let db1 = grads.at_mut(b1i);
                    for k in 0..d {
                        db1[k] += dh1[k];
                    }
                }
                let row = n.min(cfg.policy_n_max);
                let dn = grads.at_mut(ni);
                for k in 0..d {
                    dn[row * d + k] += drow[k];
                }
            }
            Token::Time(dt) => match cfg.time_head {
                TimeHeadKind::Exponential => {
                    let w = params.get("time2vec_w").row(0).to_vec();
                    let b = params.get("time2vec_b").row(0).to_vec();
                    let wi = params.tensor_index("time2vec_w");
                    let bi = params.tensor_index("time2vec_b");
                    {
                        let dw = grads.at_mut(wi);
                        dw[0] += drow[0] * dt;
                        for k in 1..d {
                            dw[k] += drow[k] * (w[k] * dt + b[k]).cos() * dt;
                        }
                    }
                    let db = grads.at_mut(bi);
                    db[0] += drow[0];
                    for k in 1..d {
                        db[k] += drow[k] * (w[k] * dt + b[k]).cos();
                    }
                }
                TimeHeadKind::Riemann { width, bins, .. } => {
                    let bin = ((dt / width).floor() as usize).min(bins - 1);
                    let ti = params.tensor_index("time_bin_emb");
                    let dt_emb = grads.at_mut(ti);
                    for k in 0..d {
                        dt_emb[bin * d + k] += drow[k];
                    }
                }
            },
            Token::Event(e) => {
                let ei = params.tensor_index("event_emb");
                let demb = grads.at_mut(ei);
                for k in 0..d {
                    demb[e * d + k] += drow[k];
                }
            }
            Token::Class(c) => {
                let ci = params.tensor_index("class_emb");
                let row = c.unwrap_or(none_class_row(cfg));
                let demb = grads.at_mut(ci);
                for k in 0..d {
                    demb[row * d + k] += drow[k];
                }
            }
        }
    }
}

/// Head readouts at one position (generation path).
pub struct HeadReadout {
    pub event_logits: Vec<f64>,
    pub class_logits: Option<Vec<f64>>,
    pub time_raw: Vec<f64>,
}

pub(super) fn read_heads(params: &ModelParams, hidden: &[f64]) -> HeadReadout {
    let cfg = &params.config;
    let d = cfg.d_model;
    let linear = |w: &super::Tensor, b: &super::Tensor| -> Vec<f64> {
        let mut out = b.data.clone();
        for r in 0..d {
            let hv = hidden[r];
            let wrow = w.row(r);
            for (o, wv) in out.iter_mut().zip(wrow) {
                *o += hv * wv;
            }
        }
        out
    };
    HeadReadout {
        event_logits: linear(params.get("event_head_w"), params.get("event_head_b")),
        class_logits: (cfg.n_classes > 1)
            .then(|| linear(params.get("class_head_w"), params.get("class_head_b"))),
        time_raw: linear(params.get("time_head_w"), params.get("time_head_b")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Trajectory;
    use crate::queuesim::{simulate_mmn, MmnConfig};
    use crate::seqmodel::{encode_trajectory, ModelConfig};

    fn setup(n_events: usize) -> (ModelParams, TokenSequence) {
        let sim = MmnConfig::mm1(0.5, 1.0);
        let schema = sim.schema();
        let mut cfg = ModelConfig::desk(&schema, n_events);
        cfg.d_model = 16;
        cfg.d_hidden = 32;
        let params = ModelParams::init(cfg.clone(), 5).unwrap();
        let traj = simulate_mmn(&sim, n_events, 7).unwrap();
        let seq = encode_trajectory(&traj, &schema, &cfg).unwrap();
        (params, seq)
    }

    #[test]
    fn outputs_finite_on_random_params() {
        let (params, seq) = setup(20);
        let parts = sequence_loss(&params, &seq);
        assert!(parts.total().is_finite());
        assert!(parts.time_sq.is_finite());
    }

    #[test]
    fn causality_is_exact() {
        let (params, seq) = setup(12);
        let base = hidden_states(&params, &seq);
        // Perturb the events halfway through the stream; hidden states
        // strictly before that position must be bit-identical.
        let mut other = seq.clone();
        let flip = other.tokens.len() / 2;
        for tok in other.tokens.iter_mut().skip(flip) {
            if let Token::Event(e) = tok {
                *e = 1 - *e;
            }
            if let Token::Time(dt) = tok {
                *dt *= 3.0;
            }
        }
        let perturbed = hidden_states(&params, &other);
        for i in 0..flip {
            for k in 0..params.config.d_model {
                assert_eq!(base[[i, k]], perturbed[[i, k]], "leak at position {i}");
            }
        }
    }

    #[test]
    fn uniform_logits_give_log2_event_loss() {
        let (mut params, seq) = setup(16);
        // Zero the event head: logits collapse to the (zero) bias, so the
        // event distribution is uniform over the two event types.
        let wi = params.tensor_index("event_head_w");
        let bi = params.tensor_index("event_head_b");
        params.tensors_mut()[wi].data.fill(0.0);
        params.tensors_mut()[bi].data.fill(0.0);
        let parts = sequence_loss(&params, &seq);
        assert!((parts.event_mean() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_sequence_losses() {
        let sim = MmnConfig::mm1(0.5, 1.0);
        let schema = sim.schema();
        let cfg = ModelConfig::desk(&schema, 30);
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let seqs: Vec<TokenSequence> = (0..4)
            .map(|s| {
                let traj = simulate_mmn(&sim, 30, 100 + s).unwrap();
                encode_trajectory(&traj, &schema, &cfg).unwrap()
            })
            .collect();
        let batch = batch_loss(&params, &seqs);
        let mut manual = LossParts::default();
        for s in &seqs {
            manual.merge(&sequence_loss(&params, s));
        }
        assert!((batch.total() - manual.total()).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_gives_zero_loss_and_grad() {
        let sim = MmnConfig::mm1(0.5, 1.0);
        let schema = sim.schema();
        let cfg = ModelConfig::desk(&schema, 10);
        let params = ModelParams::init(cfg.clone(), 3).unwrap();
        let traj = Trajectory::new(schema.empty_state(), vec![]);
        let seq = encode_trajectory(&traj, &schema, &cfg).unwrap();
        let (parts, grads) = loss_and_grad(&params, &seq);
        assert_eq!(parts.n_events, 0);
        assert_eq!(parts.total(), 0.0);
        assert!(grads.global_norm() == 0.0);
    }
}
