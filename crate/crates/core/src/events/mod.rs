//! Event-table data model and deterministic state reconstruction.
//!
//! A service system is described by an [`EventSchema`]: the vocabulary of
//! event types together with the deterministic state transition each one
//! induces. A [`Trajectory`] is an initial [`SystemState`] plus an ordered
//! list of [`EventRecord`]s; replaying the records through the schema
//! recovers the full state sequence. A trajectory is *valid* when that
//! replay never hits an impossible transition (e.g. a departure from an
//! empty system).
//!
//! Both the simulators and the replayer mutate state exclusively through
//! [`EventSchema::apply`], so simulator output replays to the exact same
//! state sequence by construction.

mod extract;

pub use extract::{
    customer_log, extract_interarrival_times, extract_service_times, extract_waiting_times,
    hourly_average, CustomerEpisode, ExtractError, Metric, Stage, StageOutcome,
};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

pub type EventId = usize;
pub type ClassId = usize;

/// Default maximum queue length used when encoding states as fixed-length
/// vectors. This bounds the encoding, not the replayed queue itself.
pub const DEFAULT_MAX_QUEUE: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("schema violation at record {index}: {reason}")]
    Violation { index: usize, reason: String },
    #[error("record {index}: event id {event} out of range")]
    UnknownEvent { index: usize, event: EventId },
    #[error("record {index}: class {class:?} inconsistent with schema")]
    ClassMismatch { index: usize, class: Option<ClassId> },
    #[error("record {index}: negative inter-event time {dt}")]
    NegativeDt { index: usize, dt: f64 },
}

impl SchemaError {
    pub fn index(&self) -> usize {
        match self {
            SchemaError::Violation { index, .. }
            | SchemaError::UnknownEvent { index, .. }
            | SchemaError::ClassMismatch { index, .. }
            | SchemaError::NegativeDt { index, .. } => *index,
        }
    }
}

/// Queue discipline of a node. `rank[class]` gives the priority tier
/// (lower is served first); FIFO order breaks ties within a tier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Discipline {
    Fifo,
    Priority { rank: Vec<u32> },
}

impl Discipline {
    /// Strict priority with the given class order (first = highest).
    pub fn strict(order: &[ClassId]) -> Self {
        let mut rank = vec![0u32; order.len()];
        for (tier, &c) in order.iter().enumerate() {
            rank[c] = tier as u32;
        }
        Discipline::Priority { rank }
    }

    fn rank_of(&self, class: ClassId) -> u32 {
        match self {
            Discipline::Fifo => 0,
            Discipline::Priority { rank } => rank.get(class).copied().unwrap_or(u32::MAX),
        }
    }
}

/// One service station: a waiting line plus a bank of servers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub servers: usize,
    /// Queue length used for fixed-width state encodings (model input);
    /// replay itself does not bound the queue.
    pub queue_capacity: usize,
    pub discipline: Discipline,
}

/// Which server of a node an event refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "sel", rename_all = "snake_case")]
pub enum ServerSel {
    /// A specific server index (per-server event types).
    Fixed { server: usize },
    /// The lowest-index busy server serving the record's class (pooled
    /// event types; exact for exponential service by memorylessness).
    AnyByClass,
}

/// Deterministic state delta induced by one event type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    /// A new customer enters `node`: takes the lowest-index idle server,
    /// otherwise joins the tail of the queue.
    Arrive { node: usize },
    /// A customer finishes at `node` and leaves the system; the freed
    /// server pulls the next waiting customer per the node discipline.
    Depart { node: usize, server: ServerSel },
    /// A customer finishes at `from` and immediately enters `to`.
    Route {
        from: usize,
        from_server: ServerSel,
        to: usize,
    },
    /// The oldest waiting customer of the record's class gives up and
    /// leaves the queue of `node`.
    Abandon { node: usize },
}

/// Event vocabulary of a system plus the transition each event induces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSchema {
    pub event_names: Vec<String>,
    pub num_classes: usize,
    pub nodes: Vec<NodeSpec>,
    pub transitions: Vec<Transition>,
    pub class_bearing: Vec<bool>,
}

impl EventSchema {
    pub fn num_events(&self) -> usize {
        self.event_names.len()
    }

    /// Event ids of plain external arrivals.
    pub fn arrival_events(&self) -> Vec<EventId> {
        self.transitions
            .iter()
            .enumerate()
            .filter_map(|(e, t)| matches!(t, Transition::Arrive { .. }).then_some(e))
            .collect()
    }

    /// Initial state with everything empty.
    pub fn empty_state(&self) -> SystemState {
        SystemState {
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeState {
                    queue: VecDeque::new(),
                    servers: vec![None; n.servers],
                })
                .collect(),
            clock: 0.0,
        }
    }

    fn check_record(&self, index: usize, rec: &EventRecord) -> Result<(), SchemaError> {
        if rec.dt < 0.0 || !rec.dt.is_finite() {
            return Err(SchemaError::NegativeDt { index, dt: rec.dt });
        }
        if rec.event >= self.num_events() {
            return Err(SchemaError::UnknownEvent {
                index,
                event: rec.event,
            });
        }
        let needs_class = self.class_bearing[rec.event];
        match rec.class {
            Some(c) if needs_class && c < self.num_classes => Ok(()),
            None if !needs_class => Ok(()),
            _ => Err(SchemaError::ClassMismatch {
                index,
                class: rec.class,
            }),
        }
    }

    /// Apply one event to `state` in place. `index` is only used for error
    /// reporting. The class of a non-class-bearing event defaults to 0.
    pub fn apply(
        &self,
        state: &mut SystemState,
        index: usize,
        rec: &EventRecord,
    ) -> Result<(), SchemaError> {
        self.check_record(index, rec)?;
        state.clock += rec.dt;
        let class = rec.class.unwrap_or(0);
        let violation = |reason: String| SchemaError::Violation { index, reason };

        match self.transitions[rec.event] {
            Transition::Arrive { node } => {
                state.nodes[node].admit(class, &self.nodes[node]);
            }
            Transition::Depart { node, server } => {
                let j = state.nodes[node]
                    .resolve_server(server, class)
                    .ok_or_else(|| {
                        violation(format!(
                            "departure '{}' with no eligible busy server at node {node}",
                            self.event_names[rec.event]
                        ))
                    })?;
                state.nodes[node].complete(j, &self.nodes[node]);
            }
            Transition::Route {
                from,
                from_server,
                to,
            } => {
                let j = state.nodes[from]
                    .resolve_server(from_server, class)
                    .ok_or_else(|| {
                        violation(format!(
                            "routing '{}' with no eligible busy server at node {from}",
                            self.event_names[rec.event]
                        ))
                    })?;
                let moved = state.nodes[from].complete(j, &self.nodes[from]);
                state.nodes[to].admit(moved, &self.nodes[to]);
            }
            Transition::Abandon { node } => {
                let pos = state.nodes[node]
                    .queue
                    .iter()
                    .position(|&c| c == class)
                    .ok_or_else(|| {
                        violation(format!(
                            "abandonment of class {class} with no such customer waiting at node {node}"
                        ))
                    })?;
                state.nodes[node].queue.remove(pos);
            }
        }
        Ok(())
    }
}

/// Per-node state: waiting line (head = next to serve under FIFO) and
/// server occupancy (`None` = idle, `Some(c)` = serving class `c`).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub queue: VecDeque<ClassId>,
    pub servers: Vec<Option<ClassId>>,
}

impl NodeState {
    /// Total customers at this node (waiting + in service).
    pub fn occupancy(&self) -> usize {
        self.queue.len() + self.servers.iter().filter(|s| s.is_some()).count()
    }

    pub fn busy_servers(&self) -> usize {
        self.servers.iter().filter(|s| s.is_some()).count()
    }

    fn admit(&mut self, class: ClassId, _spec: &NodeSpec) {
        if let Some(j) = self.servers.iter().position(|s| s.is_none()) {
            self.servers[j] = Some(class);
        } else {
            self.queue.push_back(class);
        }
    }

    fn resolve_server(&self, sel: ServerSel, class: ClassId) -> Option<usize> {
        match sel {
            ServerSel::Fixed { server } => self.servers.get(server)?.map(|_| server),
            ServerSel::AnyByClass => self.servers.iter().position(|s| *s == Some(class)),
        }
    }

    /// Free server `j`, pull the next waiting customer into it per the
    /// discipline, and return the class of the customer that completed.
    fn complete(&mut self, j: usize, spec: &NodeSpec) -> ClassId {
        let done = self.servers[j].take().expect("resolve_server checked");
        if let Some(pos) = self.next_to_serve(&spec.discipline) {
            let c = self.queue.remove(pos).unwrap();
            self.servers[j] = Some(c);
        }
        done
    }

    fn next_to_serve(&self, discipline: &Discipline) -> Option<usize> {
        if self.queue.is_empty() {
            return None;
        }
        match discipline {
            Discipline::Fifo => Some(0),
            Discipline::Priority { .. } => {
                let mut best = 0usize;
                let mut best_rank = discipline.rank_of(self.queue[0]);
                for (i, &c) in self.queue.iter().enumerate().skip(1) {
                    let r = discipline.rank_of(c);
                    if r < best_rank {
                        best = i;
                        best_rank = r;
                    }
                }
                Some(best)
            }
        }
    }
}

/// Full system state: one [`NodeState`] per node plus the clock.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub nodes: Vec<NodeState>,
    pub clock: f64,
}

impl SystemState {
    /// Convenience for single-node systems.
    pub fn node(&self) -> &NodeState {
        &self.nodes[0]
    }

    /// Total customers in the system across all nodes.
    pub fn occupancy(&self) -> usize {
        self.nodes.iter().map(NodeState::occupancy).sum()
    }

    /// Occupancy codes per server: 0 = idle, c + 1 = serving class c.
    pub fn server_codes(&self, node: usize) -> Vec<usize> {
        self.nodes[node]
            .servers
            .iter()
            .map(|s| s.map_or(0, |c| c + 1))
            .collect()
    }

    /// Queue slot codes padded/truncated to `capacity`: 0 = empty slot,
    /// c + 1 = waiting customer of class c.
    pub fn queue_codes(&self, node: usize, capacity: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.nodes[node]
            .queue
            .iter()
            .take(capacity)
            .map(|&c| c + 1)
            .collect();
        v.resize(capacity, 0);
        v
    }
}

/// One row of an event table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// Inter-event time since the previous record (system time units).
    pub dt: f64,
    /// Event id in the schema's vocabulary.
    #[serde(rename = "e")]
    pub event: EventId,
    /// Customer class, present iff the event is class-bearing.
    #[serde(rename = "c")]
    pub class: Option<ClassId>,
}

/// Free-form trajectory metadata (true parameters, seed, generator tag,
/// policy values). A `BTreeMap` keeps serialization deterministic.
pub type Meta = BTreeMap<String, serde_json::Value>;

/// An event table: initial state plus ordered records.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub initial_state: SystemState,
    pub records: Vec<EventRecord>,
    pub meta: Meta,
}

impl Trajectory {
    pub fn new(initial_state: SystemState, records: Vec<EventRecord>) -> Self {
        Self {
            initial_state,
            records,
            meta: Meta::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Cumulative event times; entry i is the clock after record i.
    pub fn cumulative_times(&self) -> Vec<f64> {
        let mut t = self.initial_state.clock;
        self.records
            .iter()
            .map(|r| {
                t += r.dt;
                t
            })
            .collect()
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(serde_json::Value::as_f64)
    }
}

/// Replay the trajectory and return the state after each event.
///
/// State `k` equals the initial state with the first `k + 1` transitions
/// applied; the first impossible transition aborts with the offending
/// record index.
pub fn reconstruct_states(
    traj: &Trajectory,
    schema: &EventSchema,
) -> Result<Vec<SystemState>, SchemaError> {
    let mut state = traj.initial_state.clone();
    let mut out = Vec::with_capacity(traj.records.len());
    for (i, rec) in traj.records.iter().enumerate() {
        schema.apply(&mut state, i, rec)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Replay without storing intermediate states; returns the final state.
pub fn replay_final(traj: &Trajectory, schema: &EventSchema) -> Result<SystemState, SchemaError> {
    let mut state = traj.initial_state.clone();
    for (i, rec) in traj.records.iter().enumerate() {
        schema.apply(&mut state, i, rec)?;
    }
    Ok(state)
}

/// True when the trajectory replays without a schema violation.
pub fn is_valid(traj: &Trajectory, schema: &EventSchema) -> bool {
    replay_final(traj, schema).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single-class M/M/1-style schema: events {arrival, departure}.
    pub(crate) fn mm1_schema() -> EventSchema {
        EventSchema {
            event_names: vec!["arrival".into(), "departure".into()],
            num_classes: 1,
            nodes: vec![NodeSpec {
                servers: 1,
                queue_capacity: DEFAULT_MAX_QUEUE,
                discipline: Discipline::Fifo,
            }],
            transitions: vec![
                Transition::Arrive { node: 0 },
                Transition::Depart {
                    node: 0,
                    server: ServerSel::Fixed { server: 0 },
                },
            ],
            class_bearing: vec![false, false],
        }
    }

    fn rec(dt: f64, event: EventId) -> EventRecord {
        EventRecord {
            dt,
            event,
            class: None,
        }
    }

    fn state_with_occupancy(schema: &EventSchema, n: usize) -> SystemState {
        let mut s = schema.empty_state();
        for _ in 0..n {
            s.nodes[0].admit(0, &schema.nodes[0]);
        }
        s
    }

    #[test]
    fn counts_follow_arrivals_minus_departures() {
        let schema = mm1_schema();
        let traj = Trajectory::new(
            state_with_occupancy(&schema, 2),
            vec![rec(1.0, 0), rec(1.0, 1), rec(1.0, 1)],
        );
        let states = reconstruct_states(&traj, &schema).unwrap();
        let counts: Vec<usize> = states.iter().map(SystemState::occupancy).collect();
        assert_eq!(counts, vec![3, 2, 1]);
    }

    #[test]
    fn departure_from_empty_is_violation_at_index_zero() {
        let schema = mm1_schema();
        let traj = Trajectory::new(schema.empty_state(), vec![rec(0.5, 1)]);
        let err = reconstruct_states(&traj, &schema).unwrap_err();
        assert_eq!(err.index(), 0);
        assert!(matches!(err, SchemaError::Violation { .. }));
    }

    #[test]
    fn hand_replayed_mm1_counts() {
        let schema = mm1_schema();
        let evs = [0, 0, 1, 0, 1, 1];
        let traj = Trajectory::new(
            schema.empty_state(),
            evs.iter().map(|&e| rec(0.25, e)).collect(),
        );
        let states = reconstruct_states(&traj, &schema).unwrap();
        let counts: Vec<usize> = states.iter().map(SystemState::occupancy).collect();
        assert_eq!(counts, vec![1, 2, 1, 2, 1, 0]);
    }

    #[test]
    fn clock_accumulates_dts() {
        let schema = mm1_schema();
        let traj = Trajectory::new(
            schema.empty_state(),
            vec![rec(0.5, 0), rec(0.25, 0), rec(1.25, 1)],
        );
        let fin = replay_final(&traj, &schema).unwrap();
        assert!((fin.clock - 2.0).abs() < 1e-12);
    }

    #[test]
    fn priority_pull_prefers_high_class() {
        // Two classes, strict priority 1 > 0 (class 1 first).
        let schema = EventSchema {
            event_names: vec!["arrival".into(), "departure".into()],
            num_classes: 2,
            nodes: vec![NodeSpec {
                servers: 1,
                queue_capacity: 10,
                discipline: Discipline::strict(&[1, 0]),
            }],
            transitions: vec![
                Transition::Arrive { node: 0 },
                Transition::Depart {
                    node: 0,
                    server: ServerSel::Fixed { server: 0 },
                },
            ],
            class_bearing: vec![true, true],
        };
        let mk = |dt, event, class| EventRecord {
            dt,
            event,
            class: Some(class),
        };
        // class 0 arrives (served), class 0 queues, class 1 queues,
        // then the server frees: class 1 must be taken before class 0.
        let traj = Trajectory::new(
            schema.empty_state(),
            vec![mk(1.0, 0, 0), mk(1.0, 0, 0), mk(1.0, 0, 1), mk(1.0, 1, 0)],
        );
        let states = reconstruct_states(&traj, &schema).unwrap();
        let last = states.last().unwrap();
        assert_eq!(last.nodes[0].servers[0], Some(1));
        assert_eq!(last.nodes[0].queue, VecDeque::from(vec![0]));
    }

    #[test]
    fn class_mismatch_detected() {
        let schema = mm1_schema();
        let traj = Trajectory::new(
            schema.empty_state(),
            vec![EventRecord {
                dt: 0.1,
                event: 0,
                class: Some(0),
            }],
        );
        let err = reconstruct_states(&traj, &schema).unwrap_err();
        assert!(matches!(err, SchemaError::ClassMismatch { .. }));
    }
}
