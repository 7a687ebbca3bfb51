//! Token-stream encoding of trajectories and the dual positional
//! encoding.

use super::ModelConfig;
use crate::events::{EventSchema, EventRecord, SystemState, Trajectory};
use crate::queuesim::PolicyParams;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("trajectory of {events} events exceeds the model capacity {capacity}")]
    CapacityExceeded { events: usize, capacity: usize },
    #[error("schema/config mismatch: {0}")]
    Mismatch(String),
}

/// One input token of the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Token {
    /// Initial-state summary (features carried by the sequence).
    State,
    /// Policy conditioning token.
    Policy,
    /// Inter-event time of the upcoming event.
    Time(f64),
    /// Realized event type.
    Event(usize),
    /// Realized class; `None` for non-class-bearing events.
    Class(Option<usize>),
}

/// Encoded trajectory: the token stream plus per-position prediction
/// targets. Positions not listed in a target vector are masked for that
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// `(position, event id)`: the event head is read at `position`.
    pub event_targets: Vec<(usize, usize)>,
    /// `(position, class id)`.
    pub class_targets: Vec<(usize, usize)>,
    /// `(position, dt)`.
    pub time_targets: Vec<(usize, f64)>,
    /// Flattened initial-state features (when the state token is used).
    pub state_features: Vec<f64>,
    /// `(c, n_servers)` policy values (when the policy token is used).
    pub policy: Option<(f64, usize)>,
    pub n_events: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Fixed-width state features: per node, the server occupancy codes
/// (0 idle, class+1) followed by `queue_capacity` queue slot codes.
pub fn state_features(state: &SystemState, schema: &EventSchema) -> Vec<f64> {
    let mut out = Vec::new();
    for (ni, spec) in schema.nodes.iter().enumerate() {
        out.extend(state.server_codes(ni).iter().map(|&c| c as f64));
        out.extend(
            state
                .queue_codes(ni, spec.queue_capacity)
                .iter()
                .map(|&c| c as f64),
        );
    }
    out
}

/// Flatten a trajectory into the `[time, event, class]` token stream with
/// per-head targets. The position before each time token predicts the
/// time, the time-token position predicts the event, and (for multi-class
/// schemas) the event-token position predicts the class; class targets of
/// non-class-bearing events are masked.
pub fn encode_trajectory(
    traj: &Trajectory,
    schema: &EventSchema,
    cfg: &ModelConfig,
) -> Result<TokenSequence, EncodeError> {
    if schema.num_events() != cfg.n_event_types || schema.num_classes != cfg.n_classes {
        return Err(EncodeError::Mismatch(format!(
            "schema has {} events / {} classes, config expects {} / {}",
            schema.num_events(),
            schema.num_classes,
            cfg.n_event_types,
            cfg.n_classes
        )));
    }
    if traj.len() > cfg.event_capacity() {
        return Err(EncodeError::CapacityExceeded {
            events: traj.len(),
            capacity: cfg.event_capacity(),
        });
    }
    let multi = cfg.n_classes > 1;
    let mut tokens = Vec::with_capacity(cfg.prefix_len() + cfg.period() * traj.len());
    if cfg.use_state_token {
        tokens.push(Token::State);
    }
    if cfg.use_policy_token {
        tokens.push(Token::Policy);
    }

    let mut event_targets = Vec::with_capacity(traj.len());
    let mut class_targets = Vec::new();
    let mut time_targets = Vec::with_capacity(traj.len());
    for rec in &traj.records {
        // The previous position (prefix or last token of the previous
        // step) predicts this inter-event time.
        if let Some(prev) = tokens.len().checked_sub(1) {
            time_targets.push((prev, rec.dt));
        }
        tokens.push(Token::Time(rec.dt));
        event_targets.push((tokens.len() - 1, rec.event));
        tokens.push(Token::Event(rec.event));
        if multi {
            if let Some(c) = rec.class {
                class_targets.push((tokens.len() - 1, c));
            }
            tokens.push(Token::Class(rec.class));
        }
    }

    let policy = if cfg.use_policy_token {
        let c = traj.meta_f64("policy_c").unwrap_or(0.0);
        let n = traj
            .meta_f64("policy_n")
            .map(|x| x as usize)
            .unwrap_or(1)
            .min(cfg.policy_n_max);
        Some((c, n))
    } else {
        None
    };

    Ok(TokenSequence {
        tokens,
        event_targets,
        class_targets,
        time_targets,
        state_features: if cfg.use_state_token {
            state_features(&traj.initial_state, schema)
        } else {
            Vec::new()
        },
        policy,
        n_events: traj.len(),
    })
}

/// Rebuild the records from a token stream (inverse of
/// [`encode_trajectory`] given the same schema and initial state).
pub fn decode_tokens(
    seq: &TokenSequence,
    cfg: &ModelConfig,
    initial_state: SystemState,
) -> Trajectory {
    let mut records = Vec::with_capacity(seq.n_events);
    let mut iter = seq.tokens.iter().skip(cfg.prefix_len());
    while let Some(tok) = iter.next() {
        let Token::Time(dt) = tok else {
            panic!("malformed stream: expected a time token, got {tok:?}")
        };
        let Some(Token::Event(event)) = iter.next() else {
            panic!("malformed stream: missing event token")
        };
        let class = if cfg.period() == 3 {
            match iter.next() {
                Some(Token::Class(c)) => *c,
                other => panic!("malformed stream: expected class token, got {other:?}"),
            }
        } else {
            None
        };
        records.push(EventRecord {
            dt: *dt,
            event: *event,
            class,
        });
    }
    Trajectory::new(initial_state, records)
}

fn sinusoidal(x: f64, d: usize, out: &mut [f64]) {
    for i in 0..d / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] += (x * freq).sin();
        out[2 * i + 1] += (x * freq).cos();
    }
    if d % 2 == 1 {
        let freq = 1.0 / 10_000f64.powf((d - 1) as f64 / d as f64);
        out[d - 1] += (x * freq).sin();
    }
}

/// Dual sinusoidal positional encoding: the sum of a step component
/// (`floor(i / period)`, constant across one event's tokens) and a
/// cyclical component (`i mod period`, distinguishing the slots within an
/// event). Deterministic; no parameters.
pub fn positional_encoding(length: usize, cfg: &ModelConfig) -> Array2<f64> {
    let d = cfg.d_model;
    let period = cfg.period();
    let mut pe = Array2::zeros((length, d));
    for i in 0..length {
        let row = pe.row_mut(i).into_slice().expect("contiguous");
        sinusoidal((i / period) as f64, d, row);
        sinusoidal((i % period) as f64, d, row);
    }
    pe
}

/// Policy helper mirroring the meta keys written by the simulators.
pub fn policy_from_meta(traj: &Trajectory) -> Option<PolicyParams> {
    Some(PolicyParams {
        c: traj.meta_f64("policy_c")?,
        n_servers: traj.meta_f64("policy_n")? as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queuesim::{simulate_mmn, MmnConfig, MmnDiscipline};

    fn mm1_setup() -> (MmnConfig, ModelConfig) {
        let cfg = MmnConfig::mm1(0.5, 1.0);
        let model = ModelConfig::desk(&cfg.schema(), 50);
        (cfg, model)
    }

    #[test]
    fn single_class_layout() {
        let (cfg, model) = mm1_setup();
        let schema = cfg.schema();
        let traj = simulate_mmn(&cfg, 2, 1).unwrap();
        let seq = encode_trajectory(&traj, &schema, &model).unwrap();
        // state token + 2 events x 2 tokens.
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.event_targets.len(), 2);
        assert_eq!(seq.time_targets.len(), 2);
        assert!(seq.class_targets.is_empty());
        // The state token predicts the first inter-event time.
        assert_eq!(seq.time_targets[0].0, 0);
        // The first time token predicts the first event.
        assert_eq!(seq.event_targets[0].0, 1);
    }

    #[test]
    fn multiclass_layout_masks_classless_events() {
        let sim = MmnConfig {
            lambdas: vec![0.4, 0.6],
            nus: vec![1.0, 1.0],
            n_servers: 2,
            discipline: MmnDiscipline::Fifo,
        };
        let schema = sim.schema();
        let model = ModelConfig::desk(&schema, 20);
        let traj = simulate_mmn(&sim, 10, 2).unwrap();
        let seq = encode_trajectory(&traj, &schema, &model).unwrap();
        assert_eq!(seq.len(), 1 + 3 * 10);
        // Every M/M/n event is class-bearing, so targets cover all steps.
        assert_eq!(seq.class_targets.len(), 10);
        // Class target sits on the event-token position.
        assert_eq!(seq.class_targets[0].0, 2);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let (cfg, model) = mm1_setup();
        let schema = cfg.schema();
        let traj = simulate_mmn(&cfg, 50, 3).unwrap();
        let seq = encode_trajectory(&traj, &schema, &model).unwrap();
        let back = decode_tokens(&seq, &model, traj.initial_state.clone());
        assert_eq!(back.records, traj.records);
    }

    #[test]
    fn capacity_enforced() {
        let (cfg, model) = mm1_setup();
        let schema = cfg.schema();
        let traj = simulate_mmn(&cfg, 51, 4).unwrap();
        assert!(matches!(
            encode_trajectory(&traj, &schema, &model),
            Err(EncodeError::CapacityExceeded { .. })
        ));
    }

    #[test]
    fn positional_encoding_shares_components() {
        let (_, model) = mm1_setup();
        let p = model.period();
        let pe = positional_encoding(4 * p, &model);
        let d = model.d_model;
        // Positions 0 and `period` share the cyclic part; their
        // difference equals the difference of the step parts alone.
        let mut step0 = vec![0.0; d];
        let mut step1 = vec![0.0; d];
        sinusoidal(0.0, d, &mut step0);
        sinusoidal(1.0, d, &mut step1);
        for k in 0..d {
            let diff = pe[[p, k]] - pe[[0, k]];
            assert!((diff - (step1[k] - step0[k])).abs() < 1e-12);
        }
        // Positions 0..period-1 share the step part similarly.
        let mut cyc0 = vec![0.0; d];
        let mut cyc1 = vec![0.0; d];
        sinusoidal(0.0, d, &mut cyc0);
        sinusoidal(1.0, d, &mut cyc1);
        for k in 0..d {
            let diff = pe[[1, k]] - pe[[0, k]];
            assert!((diff - (cyc1[k] - cyc0[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn state_features_have_configured_width() {
        let (cfg, model) = mm1_setup();
        let schema = cfg.schema();
        let feats = state_features(&schema.empty_state(), &schema);
        assert_eq!(feats.len(), model.state_dim);
        assert!(feats.iter().all(|&f| f == 0.0));
    }
}
