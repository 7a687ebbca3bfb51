//! Markovian simulators: multi-class M/M/n queues and the four
//! three-node networks, both driven by competing exponential clocks.

use super::SimError;
use crate::events::{
    ClassId, Discipline, EventId, EventRecord, EventSchema, NodeSpec, ServerSel, SystemState,
    Trajectory, Transition, DEFAULT_MAX_QUEUE,
};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};

/// Scheduling policy of an M/M/n queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MmnDiscipline {
    #[default]
    Fifo,
    /// Non-preemptive strict priority; `order[0]` is served first.
    StrictPriority { order: Vec<ClassId> },
}

/// Multi-class M/M/n configuration. Class `i` arrives at rate
/// `lambdas[i]` and is served at rate `nus[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmnConfig {
    pub lambdas: Vec<f64>,
    pub nus: Vec<f64>,
    pub n_servers: usize,
    #[serde(default)]
    pub discipline: MmnDiscipline,
}

impl MmnConfig {
    pub fn mm1(lambda: f64, nu: f64) -> Self {
        Self {
            lambdas: vec![lambda],
            nus: vec![nu],
            n_servers: 1,
            discipline: MmnDiscipline::Fifo,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.lambdas.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.lambdas.is_empty() || self.lambdas.len() != self.nus.len() {
            return Err(SimError::InvalidConfig(
                "lambdas and nus must be nonempty and of equal length".into(),
            ));
        }
        if self.n_servers == 0 {
            return Err(SimError::InvalidConfig("n_servers must be >= 1".into()));
        }
        if self
            .lambdas
            .iter()
            .chain(&self.nus)
            .any(|&r| !(r > 0.0) || !r.is_finite())
        {
            return Err(SimError::InvalidConfig("rates must be positive".into()));
        }
        if let MmnDiscipline::StrictPriority { order } = &self.discipline {
            let mut seen = vec![false; self.num_classes()];
            if order.len() != self.num_classes()
                || order.iter().any(|&c| {
                    c >= seen.len() || std::mem::replace(&mut seen[c], true)
                })
            {
                return Err(SimError::InvalidConfig(
                    "priority order must be a permutation of the classes".into(),
                ));
            }
        }
        Ok(())
    }

    /// Event vocabulary: arrival, then one departure event per server.
    pub fn schema(&self) -> EventSchema {
        let k = self.num_classes();
        let multi = k > 1;
        let mut event_names = vec!["arrival".to_string()];
        let mut transitions = vec![Transition::Arrive { node: 0 }];
        for j in 0..self.n_servers {
            event_names.push(if self.n_servers == 1 {
                "departure".to_string()
            } else {
                format!("departure_s{j}")
            });
            transitions.push(Transition::Depart {
                node: 0,
                server: ServerSel::Fixed { server: j },
            });
        }
        let n_events = event_names.len();
        EventSchema {
            event_names,
            num_classes: k,
            nodes: vec![NodeSpec {
                servers: self.n_servers,
                queue_capacity: DEFAULT_MAX_QUEUE,
                discipline: match &self.discipline {
                    MmnDiscipline::Fifo => Discipline::Fifo,
                    MmnDiscipline::StrictPriority { order } => Discipline::strict(order),
                },
            }],
            transitions,
            class_bearing: vec![multi; n_events],
        }
    }
}

/// Simulate an M/M/n queue from the empty state.
pub fn simulate_mmn(cfg: &MmnConfig, n_events: usize, seed: u64) -> Result<Trajectory, SimError> {
    let schema = cfg.schema();
    let initial = schema.empty_state();
    simulate_mmn_from(cfg, initial, n_events, seed)
}

/// Simulate an M/M/n queue starting from a given state.
///
/// Competing exponential clocks: with `K` classes and `n` servers the
/// candidate events are the `K` arrivals (rate `lambda_i`) and the busy
/// servers' completions (rate `nu` of the class in service); the next
/// event time is exponential with the total rate and the event identity
/// is drawn proportionally.
pub fn simulate_mmn_from(
    cfg: &MmnConfig,
    initial: SystemState,
    n_events: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let schema = cfg.schema();
    let multi = cfg.num_classes() > 1;
    let mut rng = SplitMix64::new(seed);
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(n_events);
    let mut weights = vec![0.0; cfg.num_classes() + cfg.n_servers];

    for i in 0..n_events {
        for (c, &l) in cfg.lambdas.iter().enumerate() {
            weights[c] = l;
        }
        for (j, occ) in state.nodes[0].servers.iter().enumerate() {
            weights[cfg.num_classes() + j] = occ.map_or(0.0, |c| cfg.nus[c]);
        }
        let total: f64 = weights.iter().sum();
        let dt = rng.exponential(total);
        let pick = rng.categorical(&weights);
        let rec = if pick < cfg.num_classes() {
            EventRecord {
                dt,
                event: 0,
                class: multi.then_some(pick),
            }
        } else {
            let j = pick - cfg.num_classes();
            let class = state.nodes[0].servers[j].expect("busy server picked");
            EventRecord {
                dt,
                event: 1 + j,
                class: multi.then_some(class),
            }
        };
        schema
            .apply(&mut state, i, &rec)
            .expect("simulator transitions are valid by construction");
        records.push(rec);
    }

    let mut traj = Trajectory::new(initial, records);
    traj.meta.insert("generator".into(), "mmn".into());
    traj.meta.insert("seed".into(), seed.into());
    traj.meta
        .insert("lambdas".into(), serde_json::json!(cfg.lambdas));
    traj.meta.insert("nus".into(), serde_json::json!(cfg.nus));
    Ok(traj)
}

/// Number of shared event types across the three-node networks.
pub const NUM_THREE_NODE_EVENTS: usize = 9;

/// Valid network ids.
pub const THREE_NODE_NETWORKS: [usize; 4] = [1, 2, 3, 4];

// Shared event vocabulary of the three-node networks.
const ARR: [EventId; 3] = [0, 1, 2];
const R12: EventId = 3;
const R13: EventId = 4;
const R23: EventId = 5;
const DEP: [EventId; 3] = [6, 7, 8];

/// Rates and routing of a three-node network. The four topologies share
/// one event vocabulary (arrivals to nodes 1-3, routings 1-2, 1-3, 2-3,
/// departures from nodes 1-3); the network id decides which events can
/// fire:
///
/// 1. tandem `1 -> 2 -> 3`;
/// 2. merge: arrivals at 1 and 2, both feed 3;
/// 3. split: arrivals at 1, routed to 2 or 3 with probability `split`;
/// 4. parallel: independent single-node queues at 1, 2 and 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreeNodeConfig {
    pub lambdas: [f64; 3],
    pub mus: [f64; 3],
    /// Probability of the 1-2 branch in the split topology.
    pub split: f64,
}

impl Default for ThreeNodeConfig {
    /// Defaults tuned so short prefixes identify the topology quickly:
    /// fast node-1 service surfaces both split branches early, and the
    /// higher entry rates at nodes 2 and 3 surface their arrivals early.
    /// All nodes are stable under every topology.
    fn default() -> Self {
        Self {
            lambdas: [1.0, 2.0, 1.5],
            mus: [7.0, 2.5, 3.5],
            split: 0.75,
        }
    }
}

impl ThreeNodeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.lambdas.iter().chain(&self.mus).any(|&r| !(r > 0.0)) {
            return Err(SimError::InvalidConfig("rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.split) {
            return Err(SimError::InvalidConfig(format!("split {}", self.split)));
        }
        Ok(())
    }
}

/// Shared schema of the three-node networks (single customer class).
pub fn three_node_schema() -> EventSchema {
    let node = |_: usize| NodeSpec {
        servers: 1,
        queue_capacity: DEFAULT_MAX_QUEUE,
        discipline: Discipline::Fifo,
    };
    EventSchema {
        event_names: vec![
            "arrival_n1".into(),
            "arrival_n2".into(),
            "arrival_n3".into(),
            "route_1_2".into(),
            "route_1_3".into(),
            "route_2_3".into(),
            "departure_n1".into(),
            "departure_n2".into(),
            "departure_n3".into(),
        ],
        num_classes: 1,
        nodes: (0..3).map(node).collect(),
        transitions: vec![
            Transition::Arrive { node: 0 },
            Transition::Arrive { node: 1 },
            Transition::Arrive { node: 2 },
            Transition::Route {
                from: 0,
                from_server: ServerSel::Fixed { server: 0 },
                to: 1,
            },
            Transition::Route {
                from: 0,
                from_server: ServerSel::Fixed { server: 0 },
                to: 2,
            },
            Transition::Route {
                from: 1,
                from_server: ServerSel::Fixed { server: 0 },
                to: 2,
            },
            Transition::Depart {
                node: 0,
                server: ServerSel::Fixed { server: 0 },
            },
            Transition::Depart {
                node: 1,
                server: ServerSel::Fixed { server: 0 },
            },
            Transition::Depart {
                node: 2,
                server: ServerSel::Fixed { server: 0 },
            },
        ],
        class_bearing: vec![false; NUM_THREE_NODE_EVENTS],
    }
}

/// Event types a given network can ever emit.
pub fn permitted_events(network_id: usize) -> Result<Vec<EventId>, SimError> {
    match network_id {
        1 => Ok(vec![ARR[0], R12, R23, DEP[2]]),
        2 => Ok(vec![ARR[0], ARR[1], R13, R23, DEP[2]]),
        3 => Ok(vec![ARR[0], R12, R13, DEP[1], DEP[2]]),
        4 => Ok(vec![ARR[0], ARR[1], ARR[2], DEP[0], DEP[1], DEP[2]]),
        other => Err(SimError::UnknownNetwork(other)),
    }
}

fn event_rates(network_id: usize, cfg: &ThreeNodeConfig, state: &SystemState) -> [f64; 9] {
    let busy = |n: usize| {
        if state.nodes[n].busy_servers() > 0 {
            1.0
        } else {
            0.0
        }
    };
    let mut r = [0.0; 9];
    match network_id {
        1 => {
            r[ARR[0]] = cfg.lambdas[0];
            r[R12] = cfg.mus[0] * busy(0);
            r[R23] = cfg.mus[1] * busy(1);
            r[DEP[2]] = cfg.mus[2] * busy(2);
        }
        2 => {
            r[ARR[0]] = cfg.lambdas[0];
            r[ARR[1]] = cfg.lambdas[1];
            r[R13] = cfg.mus[0] * busy(0);
            r[R23] = cfg.mus[1] * busy(1);
            r[DEP[2]] = cfg.mus[2] * busy(2);
        }
        3 => {
            r[ARR[0]] = cfg.lambdas[0];
            r[R12] = cfg.mus[0] * cfg.split * busy(0);
            r[R13] = cfg.mus[0] * (1.0 - cfg.split) * busy(0);
            r[DEP[1]] = cfg.mus[1] * busy(1);
            r[DEP[2]] = cfg.mus[2] * busy(2);
        }
        4 => {
            for n in 0..3 {
                r[ARR[n]] = cfg.lambdas[n];
                r[DEP[n]] = cfg.mus[n] * busy(n);
            }
        }
        _ => unreachable!("validated"),
    }
    r
}

/// Simulate one of the four three-node networks from the empty state.
pub fn simulate_threenode(
    network_id: usize,
    cfg: &ThreeNodeConfig,
    n_events: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    if !THREE_NODE_NETWORKS.contains(&network_id) {
        return Err(SimError::UnknownNetwork(network_id));
    }
    cfg.validate()?;
    let schema = three_node_schema();
    let initial = schema.empty_state();
    let mut rng = SplitMix64::new(seed);
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(n_events);

    for i in 0..n_events {
        let rates = event_rates(network_id, cfg, &state);
        let total: f64 = rates.iter().sum();
        let dt = rng.exponential(total);
        let event = rng.categorical(&rates);
        let rec = EventRecord {
            dt,
            event,
            class: None,
        };
        schema
            .apply(&mut state, i, &rec)
            .expect("simulator transitions are valid by construction");
        records.push(rec);
    }

    let mut traj = Trajectory::new(initial, records);
    traj.meta.insert("generator".into(), "three_node".into());
    traj.meta.insert("seed".into(), seed.into());
    traj.meta.insert("network_id".into(), network_id.into());
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{is_valid, reconstruct_states};

    #[test]
    fn mm1_empty_probability_matches_stationary() {
        let cfg = MmnConfig::mm1(0.5, 1.0);
        let traj = simulate_mmn(&cfg, 200_000, 42).unwrap();
        let schema = cfg.schema();
        let states = reconstruct_states(&traj, &schema).unwrap();
        // Time-weighted fraction of time empty; stationary value 1 - rho.
        let mut empty_time = 0.0;
        let mut total = 0.0;
        let mut occ = 0usize;
        for (st, rec) in states.iter().zip(&traj.records) {
            if occ == 0 {
                empty_time += rec.dt;
            }
            total += rec.dt;
            occ = st.occupancy();
        }
        let frac = empty_time / total;
        assert!((frac - 0.5).abs() < 0.01, "P(empty) {frac}");
    }

    #[test]
    fn fixed_seed_reproduces_trajectory() {
        let cfg = MmnConfig::mm1(0.5, 1.0);
        let a = simulate_mmn(&cfg, 500, 7).unwrap();
        let b = simulate_mmn(&cfg, 500, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn strict_priority_orders_waits() {
        let cfg = MmnConfig {
            lambdas: vec![0.4, 0.4],
            nus: vec![1.0, 1.0],
            n_servers: 1,
            discipline: MmnDiscipline::StrictPriority { order: vec![0, 1] },
        };
        let schema = cfg.schema();
        let traj = simulate_mmn(&cfg, 100_000, 11).unwrap();
        let log = crate::events::customer_log(&traj, &schema).unwrap();
        let mean_wait = |class: usize| {
            let waits: Vec<f64> = log
                .iter()
                .filter(|c| c.class == class)
                .filter_map(|c| c.stages[0].waiting_time())
                .collect();
            waits.iter().sum::<f64>() / waits.len() as f64
        };
        assert!(
            mean_wait(0) < mean_wait(1),
            "high priority should wait less: {} vs {}",
            mean_wait(0),
            mean_wait(1)
        );
    }

    #[test]
    fn simulated_trajectories_replay_cleanly() {
        let cfg = MmnConfig {
            lambdas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            nus: vec![0.8, 0.8, 0.8, 1.0, 1.0],
            n_servers: 5,
            discipline: MmnDiscipline::Fifo,
        };
        let traj = simulate_mmn(&cfg, 5000, 3).unwrap();
        assert!(is_valid(&traj, &cfg.schema()));
    }

    #[test]
    fn tandem_emits_only_permitted_events() {
        let cfg = ThreeNodeConfig::default();
        let traj = simulate_threenode(1, &cfg, 5000, 9).unwrap();
        let allowed = permitted_events(1).unwrap();
        assert!(traj.records.iter().all(|r| allowed.contains(&r.event)));
        assert!(is_valid(&traj, &three_node_schema()));
    }

    #[test]
    fn unknown_network_rejected() {
        let cfg = ThreeNodeConfig::default();
        assert_eq!(
            simulate_threenode(5, &cfg, 10, 1).unwrap_err(),
            SimError::UnknownNetwork(5)
        );
    }

    #[test]
    fn no_permitted_set_contains_another() {
        for a in THREE_NODE_NETWORKS {
            for b in THREE_NODE_NETWORKS {
                if a == b {
                    continue;
                }
                let ea = permitted_events(a).unwrap();
                let eb = permitted_events(b).unwrap();
                assert!(
                    !ea.iter().all(|e| eb.contains(e)),
                    "network {a} events contained in network {b}"
                );
            }
        }
    }
}
