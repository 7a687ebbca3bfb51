//! Performance-metric extraction from raw event tables.
//!
//! Two extraction paths exist side by side:
//!
//! * index-formula extraction for single-server FIFO tables
//!   ([`extract_service_times`], [`extract_waiting_times`]), operating on
//!   event indices and inter-event sums alone;
//! * replay bookkeeping ([`customer_log`]) that follows every customer
//!   through the schema transitions and works for any system, including
//!   multi-server, multi-class and multi-node ones.
//!
//! The two are cross-checked against each other in tests; the index path
//! defines the single-server semantics, the bookkeeping path generalizes
//! them.

use super::{ClassId, Discipline, EventSchema, SchemaError, Trajectory, Transition};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("operation requires a single-server FIFO schema")]
    UnsupportedDiscipline,
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Performance metric selector for bucketed averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Interarrival,
    Service,
    Waiting,
}

/// Inter-arrival times: gaps between consecutive arrival events,
/// optionally restricted to one customer class. Fewer than two matching
/// arrivals yield an empty list.
pub fn extract_interarrival_times(
    traj: &Trajectory,
    schema: &EventSchema,
    class: Option<ClassId>,
) -> Vec<f64> {
    arrival_times(traj, schema, class)
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect()
}

fn arrival_times(traj: &Trajectory, schema: &EventSchema, class: Option<ClassId>) -> Vec<f64> {
    let mut t = traj.initial_state.clock;
    let mut out = Vec::new();
    for rec in &traj.records {
        t += rec.dt;
        if matches!(schema.transitions[rec.event], Transition::Arrive { .. })
            && class.map_or(true, |c| rec.class == Some(c))
        {
            out.push(t);
        }
    }
    out
}

fn require_single_server_fifo(schema: &EventSchema) -> Result<(), ExtractError> {
    let ok = schema.nodes.len() == 1
        && schema.nodes[0].servers == 1
        && schema.nodes[0].discipline == Discipline::Fifo;
    if ok {
        Ok(())
    } else {
        Err(ExtractError::UnsupportedDiscipline)
    }
}

/// Waiting-line length after each event (single-node schemas), plus the
/// initial length at index 0; entry i+1 corresponds to record i.
fn waiting_line_profile(
    traj: &Trajectory,
    schema: &EventSchema,
) -> Result<Vec<usize>, SchemaError> {
    let mut state = traj.initial_state.clone();
    let mut out = Vec::with_capacity(traj.records.len() + 1);
    out.push(state.nodes[0].queue.len());
    for (i, rec) in traj.records.iter().enumerate() {
        schema.apply(&mut state, i, rec)?;
        out.push(state.nodes[0].queue.len());
    }
    Ok(out)
}

/// Service durations of departed customers in a single-server FIFO table.
///
/// For the (j+1)th departure at index `D_{j+1}` this is the inter-event
/// sum from `max(D_j, E_j) + 1` through `D_{j+1}`, where `E_j` is the last
/// index before `D_{j+1}` at which the waiting line is empty at-or-after
/// `D_j`. "Queue" here is the waiting line excluding the customer in
/// service, so `E_j` lands on the event that put the customer into
/// service and the idle gap is excluded.
pub fn extract_service_times(
    traj: &Trajectory,
    schema: &EventSchema,
) -> Result<Vec<f64>, ExtractError> {
    require_single_server_fifo(schema)?;
    let wl = waiting_line_profile(traj, schema)?;
    let times = traj.cumulative_times();
    // t(i) with i as 1-based event index; t(0) is the initial clock.
    let t = |i: usize| {
        if i == 0 {
            traj.initial_state.clock
        } else {
            times[i - 1]
        }
    };
    let departures: Vec<usize> = traj
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            matches!(schema.transitions[r.event], Transition::Depart { .. }).then_some(i + 1)
        })
        .collect();

    let mut out = Vec::with_capacity(departures.len());
    let mut prev_d = 0usize;
    for &d in &departures {
        // E = max index in [prev_d, d) with empty waiting line; wl[i] is
        // the line after event i, with wl[0] the initial line.
        let e = (prev_d..d).filter(|&i| wl[i] == 0).max();
        let start = e.map_or(prev_d, |e| e.max(prev_d));
        out.push(t(d) - t(start));
        prev_d = d;
    }
    Ok(out)
}

/// Waiting times of customers that arrive within a single-server FIFO
/// table: the inter-event sum from each arrival to the service start that
/// picks the customer up. `q0` is the initial waiting-line length (the
/// customer in service, if any, is implied by the initial state).
///
/// A customer served immediately on arrival waits exactly 0. Customers
/// whose service never starts within the table are skipped.
pub fn extract_waiting_times(
    traj: &Trajectory,
    schema: &EventSchema,
    q0: usize,
) -> Result<Vec<f64>, ExtractError> {
    require_single_server_fifo(schema)?;
    let wl = waiting_line_profile(traj, schema)?;
    let times = traj.cumulative_times();
    let t = |i: usize| {
        if i == 0 {
            traj.initial_state.clock
        } else {
            times[i - 1]
        }
    };

    // Service starts observed in the table, in order: an arrival that
    // finds the waiting line empty and the server idle starts at once; a
    // departure that leaves a nonempty line pulls the next customer in.
    let mut server_busy = traj.initial_state.nodes[0].busy_servers() > 0;
    let mut start_times = Vec::new();
    let mut arrival_indices = Vec::new();
    for (i1, rec) in traj.records.iter().enumerate().map(|(i, r)| (i + 1, r)) {
        match schema.transitions[rec.event] {
            Transition::Arrive { .. } => {
                arrival_indices.push(i1);
                if !server_busy {
                    start_times.push(t(i1));
                    server_busy = true;
                }
            }
            Transition::Depart { .. } => {
                // wl[i1 - 1] is the line just before this departure.
                if wl[i1 - 1] > 0 {
                    start_times.push(t(i1));
                } else {
                    server_busy = false;
                }
            }
            _ => {}
        }
    }

    let mut out = Vec::new();
    for (j, &a) in arrival_indices.iter().enumerate() {
        // The j-th arriving customer (1-based j+1) is picked up by the
        // (q0 + j + 1)-th observed service start.
        match start_times.get(q0 + j) {
            Some(&s) => out.push(s - t(a)),
            None => break,
        }
    }
    Ok(out)
}

/// Outcome of one stage of a customer's journey through a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Served,
    Abandoned,
    /// The table ended before the stage resolved.
    Incomplete,
}

/// One node visit of one customer.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub node: usize,
    pub entered: f64,
    pub service_start: Option<f64>,
    pub ended: Option<f64>,
    pub outcome: StageOutcome,
}

impl Stage {
    pub fn waiting_time(&self) -> Option<f64> {
        self.service_start.map(|s| s - self.entered)
    }

    pub fn service_time(&self) -> Option<f64> {
        match (self.service_start, self.ended, self.outcome) {
            (Some(s), Some(e), StageOutcome::Served) => Some(e - s),
            _ => None,
        }
    }
}

/// Full journey of one customer, reconstructed by replay.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomerEpisode {
    /// Position in arrival order; initial occupants come first.
    pub id: usize,
    pub class: ClassId,
    /// True for customers already present in the initial state.
    pub initial: bool,
    pub stages: Vec<Stage>,
}

impl CustomerEpisode {
    pub fn abandoned(&self) -> bool {
        self.stages
            .iter()
            .any(|s| s.outcome == StageOutcome::Abandoned)
    }
}

struct IdNode {
    queue: VecDeque<usize>,
    servers: Vec<Option<usize>>,
}

/// Per-customer bookkeeping for arbitrary schemas, obtained by replaying
/// the table with customer identities attached. Works for multi-server,
/// multi-class and multi-node systems; identities follow the same
/// deterministic rules as [`EventSchema::apply`].
pub fn customer_log(
    traj: &Trajectory,
    schema: &EventSchema,
) -> Result<Vec<CustomerEpisode>, ExtractError> {
    let t0 = traj.initial_state.clock;
    let mut customers: Vec<CustomerEpisode> = Vec::new();
    let mut nodes: Vec<IdNode> = Vec::new();

    // Seed identities from the initial state: in-service customers first
    // (their starts are censored to t0), then the waiting line in order.
    for (ni, node) in traj.initial_state.nodes.iter().enumerate() {
        let mut id_node = IdNode {
            queue: VecDeque::new(),
            servers: vec![None; node.servers.len()],
        };
        for (j, occ) in node.servers.iter().enumerate() {
            if let Some(c) = occ {
                let id = customers.len();
                customers.push(CustomerEpisode {
                    id,
                    class: *c,
                    initial: true,
                    stages: vec![Stage {
                        node: ni,
                        entered: t0,
                        service_start: Some(t0),
                        ended: None,
                        outcome: StageOutcome::Incomplete,
                    }],
                });
                id_node.servers[j] = Some(id);
            }
        }
        for &c in &node.queue {
            let id = customers.len();
            customers.push(CustomerEpisode {
                id,
                class: c,
                initial: true,
                stages: vec![Stage {
                    node: ni,
                    entered: t0,
                    service_start: None,
                    ended: None,
                    outcome: StageOutcome::Incomplete,
                }],
            });
            id_node.queue.push_back(id);
        }
        nodes.push(id_node);
    }

    let mut now = t0;
    let violation = |index: usize, reason: &str| {
        ExtractError::Schema(SchemaError::Violation {
            index,
            reason: reason.to_string(),
        })
    };

    for (i, rec) in traj.records.iter().enumerate() {
        now += rec.dt;
        let class = rec.class.unwrap_or(0);
        match schema.transitions[rec.event] {
            Transition::Arrive { node } => {
                let id = customers.len();
                let mut stage = Stage {
                    node,
                    entered: now,
                    service_start: None,
                    ended: None,
                    outcome: StageOutcome::Incomplete,
                };
                if let Some(j) = nodes[node].servers.iter().position(Option::is_none) {
                    stage.service_start = Some(now);
                    nodes[node].servers[j] = Some(id);
                } else {
                    nodes[node].queue.push_back(id);
                }
                customers.push(CustomerEpisode {
                    id,
                    class,
                    initial: false,
                    stages: vec![stage],
                });
            }
            Transition::Depart { node, server } => {
                let j = resolve(&nodes[node], &customers, server, class)
                    .ok_or_else(|| violation(i, "departure with no eligible busy server"))?;
                complete(&mut nodes[node], &mut customers, schema, node, j, now);
            }
            Transition::Route {
                from,
                from_server,
                to,
            } => {
                let j = resolve(&nodes[from], &customers, from_server, class)
                    .ok_or_else(|| violation(i, "routing with no eligible busy server"))?;
                let id = complete(&mut nodes[from], &mut customers, schema, from, j, now);
                let mut stage = Stage {
                    node: to,
                    entered: now,
                    service_start: None,
                    ended: None,
                    outcome: StageOutcome::Incomplete,
                };
                if let Some(k) = nodes[to].servers.iter().position(Option::is_none) {
                    stage.service_start = Some(now);
                    nodes[to].servers[k] = Some(id);
                } else {
                    nodes[to].queue.push_back(id);
                }
                customers[id].stages.push(stage);
            }
            Transition::Abandon { node } => {
                let pos = nodes[node]
                    .queue
                    .iter()
                    .position(|&id| customers[id].class == class)
                    .ok_or_else(|| violation(i, "abandonment with no waiting customer"))?;
                let id = nodes[node].queue.remove(pos).unwrap();
                let stage = customers[id].stages.last_mut().unwrap();
                stage.ended = Some(now);
                stage.outcome = StageOutcome::Abandoned;
            }
        }
    }
    Ok(customers)
}

fn resolve(
    node: &IdNode,
    customers: &[CustomerEpisode],
    sel: super::ServerSel,
    class: ClassId,
) -> Option<usize> {
    match sel {
        super::ServerSel::Fixed { server } => node.servers.get(server)?.map(|_| server),
        super::ServerSel::AnyByClass => node
            .servers
            .iter()
            .position(|s| s.map_or(false, |id| customers[id].class == class)),
    }
}

/// Finish service at server `j`, pull the next waiting customer per the
/// node discipline, and return the id of the completed customer.
fn complete(
    node: &mut IdNode,
    customers: &mut [CustomerEpisode],
    schema: &EventSchema,
    node_idx: usize,
    j: usize,
    now: f64,
) -> usize {
    let id = node.servers[j].take().expect("resolved busy server");
    {
        let stage = customers[id].stages.last_mut().unwrap();
        stage.ended = Some(now);
        stage.outcome = StageOutcome::Served;
    }
    let discipline = &schema.nodes[node_idx].discipline;
    if !node.queue.is_empty() {
        let pos = match discipline {
            Discipline::Fifo => 0,
            Discipline::Priority { .. } => {
                let mut best = 0usize;
                let mut best_rank = discipline.rank_of(customers[node.queue[0]].class);
                for (k, &cid) in node.queue.iter().enumerate().skip(1) {
                    let r = discipline.rank_of(customers[cid].class);
                    if r < best_rank {
                        best = k;
                        best_rank = r;
                    }
                }
                best
            }
        };
        let next = node.queue.remove(pos).unwrap();
        customers[next].stages.last_mut().unwrap().service_start = Some(now);
        node.servers[j] = Some(next);
    }
    id
}

/// Bucket metric samples by the hour in which each sample begins and
/// average per bucket over all trajectories. Buckets without samples are
/// omitted. Returned pairs are sorted by hour index.
pub fn hourly_average(
    trajs: &[Trajectory],
    schema: &EventSchema,
    metric: Metric,
    hour_len: f64,
) -> Result<Vec<(usize, f64)>, ExtractError> {
    assert!(hour_len > 0.0);
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut push = |begin: f64, value: f64| {
        let h = (begin / hour_len).floor() as usize;
        if h >= sums.len() {
            sums.resize(h + 1, 0.0);
            counts.resize(h + 1, 0);
        }
        sums[h] += value;
        counts[h] += 1;
    };

    for traj in trajs {
        match metric {
            Metric::Interarrival => {
                let at = arrival_times(traj, schema, None);
                for w in at.windows(2) {
                    push(w[0], w[1] - w[0]);
                }
            }
            Metric::Service => {
                for cust in customer_log(traj, schema)? {
                    for stage in &cust.stages {
                        if let (Some(s), Some(v)) = (stage.service_start, stage.service_time()) {
                            push(s, v);
                        }
                    }
                }
            }
            Metric::Waiting => {
                for cust in customer_log(traj, schema)? {
                    for stage in &cust.stages {
                        if let Some(w) = stage.waiting_time() {
                            push(stage.entered, w);
                        }
                    }
                }
            }
        }
    }

    Ok(sums
        .iter()
        .zip(&counts)
        .enumerate()
        .filter(|(_, (_, &c))| c > 0)
        .map(|(h, (&s, &c))| (h, s / c as f64))
        .collect())
}
