//! Decoder-only autoregressive sequence model over event tables.
//!
//! Event tables are flattened into a token stream with one slot group per
//! event. Within step `n` the stream is `[time_n, event_n, class_n]`
//! (the class slot is dropped for single-class systems): the time head
//! reads the position *before* `time_n` and so conditions on steps up to
//! `n-1` only, the event head reads the `time_n` position and
//! additionally conditions on the realized time, and the class head reads
//! the `event_n` position. Sampling therefore proceeds time first, then
//! event, then class, matching the factorization the generator uses.
//!
//! Everything is 64-bit and deterministic: initialization, shuffling and
//! sampling all flow through seeded [`SplitMix64`](crate::rng::SplitMix64)
//! streams, and batch gradients are reduced in a fixed order.

mod checkpoint;
mod encoding;
mod generate;
mod net;
mod toy;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use encoding::{
    decode_tokens, encode_trajectory, policy_from_meta, positional_encoding, state_features,
    EncodeError, Token, TokenSequence,
};
pub use generate::{generate, GenerateOptions, IncrementalModel};
pub use net::{
    batch_loss, hidden_states, loss_and_grad, sequence_loss, sequence_step_losses, Grads,
    LossParts,
};
pub use toy::LinearToy;
pub use train::{
    grad_check_model, lr_at_epoch, max_rel_err_fd, train, OptConfig, TrainError, TrainReport,
};

use crate::events::EventSchema;
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Inter-event-time head: a single softplus rate (Markovian mode) or a
/// Riemann-discretized categorical over time bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeHeadKind {
    Exponential,
    Riemann {
        width: f64,
        bins: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tail_scale: Option<f64>,
    },
}

/// Positional-encoding flavor. The sinusoidal variant is used throughout;
/// the learnable variant exists as a config stub and is rejected at
/// parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    #[default]
    Sinusoidal,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_event_types: usize,
    /// Customer classes; 1 drops the class slot entirely.
    pub n_classes: usize,
    pub time_head: TimeHeadKind,
    pub max_seq_len: usize,
    #[serde(default = "default_true")]
    pub use_state_token: bool,
    #[serde(default)]
    pub use_policy_token: bool,
    /// Length of the flattened state feature vector (servers plus
    /// fixed-width queue slots over all nodes).
    pub state_dim: usize,
    /// Largest categorical policy value (server count) representable.
    #[serde(default = "default_policy_n_max")]
    pub policy_n_max: usize,
    #[serde(default)]
    pub positional: PositionalKind,
}

fn default_true() -> bool {
    true
}

fn default_policy_n_max() -> usize {
    20
}

impl ModelConfig {
    /// Desk-scale defaults (d 32, hidden 128, 2 heads, 2 layers) for the
    /// given schema. The paper-scale analogue is 64/512/4/8.
    pub fn desk(schema: &EventSchema, n_events: usize) -> Self {
        let mut cfg = Self {
            d_model: 32,
            d_hidden: 128,
            n_heads: 2,
            n_layers: 2,
            n_event_types: schema.num_events(),
            n_classes: schema.num_classes,
            time_head: TimeHeadKind::Exponential,
            max_seq_len: 0,
            use_state_token: true,
            use_policy_token: false,
            state_dim: state_dim(schema),
            policy_n_max: 20,
            positional: PositionalKind::Sinusoidal,
        };
        cfg.max_seq_len = cfg.prefix_len() + cfg.period() * n_events;
        cfg
    }

    /// Tokens per event: `[time, event, class]`, or `[time, event]` when
    /// there is a single class.
    pub fn period(&self) -> usize {
        if self.n_classes > 1 {
            3
        } else {
            2
        }
    }

    pub fn prefix_len(&self) -> usize {
        usize::from(self.use_state_token) + usize::from(self.use_policy_token)
    }

    /// Events that fit into `max_seq_len` minus the prefix.
    pub fn event_capacity(&self) -> usize {
        (self.max_seq_len - self.prefix_len()) / self.period()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_event_types == 0 || self.n_classes == 0 {
            return Err("event and class vocabularies must be nonempty".into());
        }
        if self.max_seq_len < self.prefix_len() + self.period() {
            return Err("max_seq_len leaves no room for events".into());
        }
        if let TimeHeadKind::Riemann { width, bins, .. } = self.time_head {
            if !(width > 0.0) || bins < 2 {
                return Err(format!("riemann head needs width > 0 and bins >= 2"));
            }
        }
        Ok(())
    }
}

/// Flattened state-feature length of a schema: per node, one slot per
/// server plus `queue_capacity` queue slots.
pub fn state_dim(schema: &EventSchema) -> usize {
    schema
        .nodes
        .iter()
        .map(|n| n.servers + n.queue_capacity)
        .sum()
}

/// One named parameter tensor (vectors are 1 x n).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, rows: usize, cols: usize) -> Self {
        Self {
            name: name.to_string(),
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn view(&self) -> ndarray::ArrayView2<'_, f64> {
        ndarray::ArrayView2::from_shape((self.rows, self.cols), &self.data).expect("shape")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Flat store of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Row index of the "no class" embedding for non-class-bearing events.
pub fn none_class_row(cfg: &ModelConfig) -> usize {
    cfg.n_classes
}

impl ModelParams {
    /// Scaled-normal initialization (std 0.02) for embeddings and weight
    /// matrices, zeros for biases, ones for layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, String> {
        config.validate()?;
        if config.positional == PositionalKind::Learnable {
            return Err("learnable positional encoding is a config stub; use sinusoidal".into());
        }
        let mut rng = SplitMix64::new(seed);
        let mut tensors: Vec<Tensor> = Vec::new();
        let d = config.d_model;
        let f = config.d_hidden;
        fn scaled_normal(rng: &mut SplitMix64, name: &str, rows: usize, cols: usize) -> Tensor {
            let mut t = Tensor::zeros(name, rows, cols);
            for v in &mut t.data {
                *v = 0.02 * rng.normal();
            }
            t
        }
        let zeros =
            |name: &str, rows: usize, cols: usize, tensors: &mut Vec<Tensor>| {
                tensors.push(Tensor::zeros(name, rows, cols));
            };
        let ones = |name: &str, cols: usize, tensors: &mut Vec<Tensor>| {
            let mut t = Tensor::zeros(name, 1, cols);
            t.data.fill(1.0);
            tensors.push(t);
        };

        tensors.push(scaled_normal(&mut rng, "event_emb", config.n_event_types, d));
        if config.n_classes > 1 {
            // Extra row embeds "no class" slots of non-class-bearing events.
            tensors.push(scaled_normal(&mut rng, "class_emb", config.n_classes + 1, d));
        }
        match config.time_head {
            TimeHeadKind::Exponential => {
                // Time2Vec: one linear feature plus d-1 sinusoidal ones,
                // with spread initial frequencies and phases.
                let mut w = scaled_normal(&mut rng, "time2vec_w", 1, d);
                let mut b = scaled_normal(&mut rng, "time2vec_b", 1, d);
                w.data[0] = 1.0;
                b.data[0] = 0.0;
                for k in 1..d {
                    w.data[k] = rng.normal();
                    b.data[k] = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
                }
                tensors.push(w);
                tensors.push(b);
            }
            TimeHeadKind::Riemann { bins, .. } => {
                tensors.push(scaled_normal(&mut rng, "time_bin_emb", bins, d));
            }
        }
        if config.use_state_token {
            tensors.push(scaled_normal(&mut rng, "state_proj_w", config.state_dim, d));
            zeros("state_proj_b", 1, d, &mut tensors);
        }
        if config.use_policy_token {
            tensors.push(scaled_normal(&mut rng, "policy_c_w1", 1, d));
            zeros("policy_c_b1", 1, d, &mut tensors);
            tensors.push(scaled_normal(&mut rng, "policy_c_w2", d, d));
            zeros("policy_c_b2", 1, d, &mut tensors);
            tensors.push(scaled_normal(&mut rng, "policy_n_emb", config.policy_n_max + 1, d));
        }
        for l in 0..config.n_layers {
            ones(&format!("l{l}_ln1_g"), d, &mut tensors);
            zeros(&format!("l{l}_ln1_b"), 1, d, &mut tensors);
            tensors.push(scaled_normal(&mut rng, &format!("l{l}_qkv_w"), d, 3 * d));
            zeros(&format!("l{l}_qkv_b"), 1, 3 * d, &mut tensors);
            tensors.push(scaled_normal(&mut rng, &format!("l{l}_proj_w"), d, d));
            zeros(&format!("l{l}_proj_b"), 1, d, &mut tensors);
            ones(&format!("l{l}_ln2_g"), d, &mut tensors);
            zeros(&format!("l{l}_ln2_b"), 1, d, &mut tensors);
            tensors.push(scaled_normal(&mut rng, &format!("l{l}_fc1_w"), d, f));
            zeros(&format!("l{l}_fc1_b"), 1, f, &mut tensors);
            tensors.push(scaled_normal(&mut rng, &format!("l{l}_fc2_w"), f, d));
            zeros(&format!("l{l}_fc2_b"), 1, d, &mut tensors);
        }
        ones("lnf_g", d, &mut tensors);
        zeros("lnf_b", 1, d, &mut tensors);
        tensors.push(scaled_normal(&mut rng, "event_head_w", d, config.n_event_types));
        zeros("event_head_b", 1, config.n_event_types, &mut tensors);
        if config.n_classes > 1 {
            tensors.push(scaled_normal(&mut rng, "class_head_w", d, config.n_classes));
            zeros("class_head_b", 1, config.n_classes, &mut tensors);
        }
        let time_out = match config.time_head {
            TimeHeadKind::Exponential => 1,
            TimeHeadKind::Riemann { bins, .. } => bins,
        };
        tensors.push(scaled_normal(&mut rng, "time_head_w", d, time_out));
        zeros("time_head_b", 1, time_out, &mut tensors);

        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Ok(Self {
            config,
            tensors,
            index,
        })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Self {
            config,
            tensors,
            index,
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))]
    }

    pub fn tensor_index(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// The Riemann head's distribution for a probability vector produced
    /// by the head softmax.
    pub fn riemann_dist(
        &self,
        probs: Vec<f64>,
    ) -> Result<crate::timedist::RiemannDist, crate::timedist::TimeDistError> {
        match self.config.time_head {
            TimeHeadKind::Riemann {
                width, tail_scale, ..
            } => crate::timedist::RiemannDist::new(width, probs, tail_scale),
            TimeHeadKind::Exponential => Err(crate::timedist::TimeDistError::Invalid(
                "model uses the exponential head".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queuesim::MmnConfig;

    #[test]
    fn desk_config_shapes() {
        let schema = MmnConfig::mm1(0.5, 1.0).schema();
        let cfg = ModelConfig::desk(&schema, 200);
        assert_eq!(cfg.period(), 2);
        assert_eq!(cfg.prefix_len(), 1);
        assert_eq!(cfg.event_capacity(), 200);
        let params = ModelParams::init(cfg, 1).unwrap();
        assert!(params.all_finite());
        assert!(params.num_params() > 10_000);
    }

    #[test]
    fn multiclass_period_is_three() {
        let schema = MmnConfig {
            lambdas: vec![1.0; 5],
            nus: vec![1.0; 5],
            n_servers: 5,
            discipline: Default::default(),
        }
        .schema();
        let cfg = ModelConfig::desk(&schema, 100);
        assert_eq!(cfg.period(), 3);
        let params = ModelParams::init(cfg, 2).unwrap();
        // Class table has the extra "no class" row.
        assert_eq!(params.get("class_emb").rows, 6);
    }

    #[test]
    fn init_is_deterministic() {
        let schema = MmnConfig::mm1(0.5, 1.0).schema();
        let cfg = ModelConfig::desk(&schema, 50);
        let a = ModelParams::init(cfg.clone(), 9).unwrap();
        let b = ModelParams::init(cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learnable_positional_is_rejected() {
        let schema = MmnConfig::mm1(0.5, 1.0).schema();
        let mut cfg = ModelConfig::desk(&schema, 50);
        cfg.positional = PositionalKind::Learnable;
        assert!(ModelParams::init(cfg, 0).is_err());
    }

    #[test]
    fn invalid_head_split_rejected() {
        let schema = MmnConfig::mm1(0.5, 1.0).schema();
        let mut cfg = ModelConfig::desk(&schema, 50);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
    }
}
