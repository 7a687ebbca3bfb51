//! Two-stage call-center simulator: a large VRU bank feeding a small
//! team of human agents with priority scheduling and abandonment.

use super::{Dist, SimError};
use crate::events::{
    ClassId, Discipline, EventRecord, EventSchema, NodeSpec, ServerSel, Trajectory, Transition,
    DEFAULT_MAX_QUEUE,
};
use crate::rng::SplitMix64;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;

const NUM_CLASSES: usize = 6;

/// Built-in synthetic service-time samples (seconds), lognormal-shaped,
/// standing in for the published empirical histograms. Configs may point
/// at user-supplied sample files instead.
const SERVICE_SAMPLES: &str = include_str!("../../data/callcenter_service_samples.json");

#[derive(Deserialize)]
struct ServiceSamples {
    agent: Vec<Vec<f64>>,
    vru: Vec<Vec<f64>>,
}

fn builtin_samples() -> ServiceSamples {
    serde_json::from_str(SERVICE_SAMPLES).expect("embedded sample data parses")
}

/// Call-center configuration. Times are in seconds and rates per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CallCenterConfig {
    /// Customer-type mix of arrivals; must sum to 1.
    pub class_props: [f64; 6],
    /// Total Poisson arrival rate (per second) across all types.
    pub total_arrival_rate: f64,
    /// VRU bank size; large enough to make VRU waits negligible.
    pub vru_servers: usize,
    /// Per-class VRU service-time distributions.
    pub vru_service: Vec<Dist>,
    /// Per-class human-agent service-time distributions.
    pub agent_service: Vec<Dist>,
    /// Mean exponential patience per class (seconds).
    pub patience_means_sec: [f64; 6],
    pub n_agents: usize,
    /// Zero-based classes served ahead of the rest (FIFO within a tier).
    pub high_priority_classes: Vec<ClassId>,
}

impl Default for CallCenterConfig {
    fn default() -> Self {
        let samples = builtin_samples();
        Self {
            class_props: [0.50, 0.20, 0.10, 0.05, 0.05, 0.10],
            total_arrival_rate: 0.0303,
            vru_servers: 1000,
            vru_service: samples
                .vru
                .into_iter()
                .map(|samples| Dist::Empirical { samples })
                .collect(),
            agent_service: samples
                .agent
                .into_iter()
                .map(|samples| Dist::Empirical { samples })
                .collect(),
            patience_means_sec: [521.0, 644.0, 528.0, 703.0, 647.0, 491.0],
            n_agents: 6,
            // Types 2 and 5 (one-based) have high priority.
            high_priority_classes: vec![1, 4],
        }
    }
}

impl CallCenterConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let prop_sum: f64 = self.class_props.iter().sum();
        if (prop_sum - 1.0).abs() > 1e-9 || self.class_props.iter().any(|&p| p < 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "class proportions must be nonnegative and sum to 1 (got {prop_sum})"
            )));
        }
        if !(self.total_arrival_rate > 0.0) {
            return Err(SimError::InvalidConfig("arrival rate must be positive".into()));
        }
        if self.vru_servers == 0 || self.n_agents == 0 {
            return Err(SimError::InvalidConfig("server counts must be >= 1".into()));
        }
        if self.vru_service.len() != NUM_CLASSES || self.agent_service.len() != NUM_CLASSES {
            return Err(SimError::InvalidConfig(
                "service distributions must cover all six classes".into(),
            ));
        }
        for d in self.vru_service.iter().chain(&self.agent_service) {
            d.validate()?;
        }
        if self.patience_means_sec.iter().any(|&m| !(m > 0.0)) {
            return Err(SimError::InvalidConfig("patience means must be positive".into()));
        }
        if self
            .high_priority_classes
            .iter()
            .any(|&c| c >= NUM_CLASSES)
        {
            return Err(SimError::InvalidConfig("priority class out of range".into()));
        }
        Ok(())
    }

    /// Nine event types: arrival, pooled VRU completion, abandonment, and
    /// one departure per agent.
    pub fn schema(&self) -> EventSchema {
        let mut event_names = vec![
            "arrival".to_string(),
            "vru_done".to_string(),
            "abandon".to_string(),
        ];
        let mut transitions = vec![
            Transition::Arrive { node: 0 },
            Transition::Route {
                from: 0,
                from_server: ServerSel::AnyByClass,
                to: 1,
            },
            Transition::Abandon { node: 1 },
        ];
        for j in 0..self.n_agents {
            event_names.push(format!("departure_a{j}"));
            transitions.push(Transition::Depart {
                node: 1,
                server: ServerSel::Fixed { server: j },
            });
        }
        let mut rank = vec![1u32; NUM_CLASSES];
        for &c in &self.high_priority_classes {
            rank[c] = 0;
        }
        let n_events = event_names.len();
        EventSchema {
            event_names,
            num_classes: NUM_CLASSES,
            nodes: vec![
                NodeSpec {
                    servers: self.vru_servers,
                    queue_capacity: DEFAULT_MAX_QUEUE,
                    discipline: Discipline::Fifo,
                },
                NodeSpec {
                    servers: self.n_agents,
                    queue_capacity: DEFAULT_MAX_QUEUE,
                    discipline: Discipline::Priority { rank },
                },
            ],
            transitions,
            class_bearing: vec![true; n_events],
        }
    }
}

/// Min-heap entry for scheduled completions; the sequence number breaks
/// ties deterministically.
#[derive(PartialEq)]
struct Scheduled {
    time: f64,
    seq: u64,
    class: ClassId,
}

impl Eq for Scheduled {}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Simulate the call center from the empty state.
///
/// Abandonment uses the aggregate per-class hazard of the waiting
/// customers (count / mean patience); by memorylessness of exponential
/// patience this reproduces the queue-count process exactly, and the
/// schema's oldest-of-class rule decides which caller leaves.
pub fn simulate_callcenter(
    cfg: &CallCenterConfig,
    n_events: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    cfg.validate()?;
    let schema = cfg.schema();
    let initial = schema.empty_state();
    let mut state = initial.clone();
    let mut rng = SplitMix64::new(seed);

    let mut now = 0.0;
    let mut next_arrival = rng.exponential(cfg.total_arrival_rate);
    let mut vru_heap: BinaryHeap<Scheduled> = BinaryHeap::new();
    let mut vru_seq = 0u64;
    let mut agent_finish: Vec<Option<f64>> = vec![None; cfg.n_agents];
    // Mirror of busy VRU servers to detect fresh service starts cheaply.
    let mut vru_busy = 0usize;
    let mut records = Vec::with_capacity(n_events);

    for i in 0..n_events {
        // Candidate fixed-time events.
        let mut best_time = next_arrival;
        let mut best: u8 = 0; // 0 arrival, 1 vru, 2 agent j, 3 abandon
        let mut best_agent = 0usize;
        if let Some(top) = vru_heap.peek() {
            if top.time < best_time {
                best_time = top.time;
                best = 1;
            }
        }
        for (j, f) in agent_finish.iter().enumerate() {
            if let Some(t) = f {
                if *t < best_time {
                    best_time = *t;
                    best = 2;
                    best_agent = j;
                }
            }
        }
        // Abandonment race: exponential with the aggregate hazard of the
        // agent queue, redrawn each iteration (memoryless).
        let mut hazards = [0.0; NUM_CLASSES];
        for &c in &state.nodes[1].queue {
            hazards[c] += 1.0 / cfg.patience_means_sec[c];
        }
        let hazard_total: f64 = hazards.iter().sum();
        if hazard_total > 0.0 {
            let t_ab = now + rng.exponential(hazard_total);
            if t_ab < best_time {
                best_time = t_ab;
                best = 3;
            }
        }

        let rec = match best {
            0 => {
                let class = rng.categorical(&cfg.class_props);
                next_arrival = best_time + rng.exponential(cfg.total_arrival_rate);
                EventRecord {
                    dt: best_time - now,
                    event: 0,
                    class: Some(class),
                }
            }
            1 => {
                let done = vru_heap.pop().unwrap();
                vru_busy -= 1;
                EventRecord {
                    dt: best_time - now,
                    event: 1,
                    class: Some(done.class),
                }
            }
            2 => {
                let class = state.nodes[1].servers[best_agent].expect("busy agent");
                agent_finish[best_agent] = None;
                EventRecord {
                    dt: best_time - now,
                    event: 3 + best_agent,
                    class: Some(class),
                }
            }
            _ => {
                let class = rng.categorical(&hazards);
                EventRecord {
                    dt: best_time - now,
                    event: 2,
                    class: Some(class),
                }
            }
        };
        now = best_time;
        let vru_queue_head = state.nodes[0].queue.front().copied();
        schema
            .apply(&mut state, i, &rec)
            .expect("simulator transitions are valid by construction");

        // Schedule services that just started at either stage.
        let vru_now_busy = state.nodes[0].busy_servers();
        if vru_now_busy > vru_busy {
            // Either the fresh arrival started VRU service directly, or a
            // completion pulled the head of the (rarely used) VRU queue.
            let class = if rec.event == 0 {
                rec.class.unwrap()
            } else {
                vru_queue_head.expect("a pulled VRU start implies a waiting customer")
            };
            vru_heap.push(Scheduled {
                time: now + cfg.vru_service[class].sample(&mut rng),
                seq: vru_seq,
                class,
            });
            vru_seq += 1;
        }
        vru_busy = vru_now_busy;
        for (j, occ) in state.nodes[1].servers.iter().enumerate() {
            if let Some(c) = occ {
                if agent_finish[j].is_none() {
                    agent_finish[j] = Some(now + cfg.agent_service[*c].sample(&mut rng));
                }
            }
        }
        records.push(rec);
    }

    let mut traj = Trajectory::new(initial, records);
    traj.meta.insert("generator".into(), "call_center".into());
    traj.meta.insert("seed".into(), seed.into());
    Ok(traj)
}
