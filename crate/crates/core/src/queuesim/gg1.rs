//! G/G/1 simulation with an event calendar.

use super::{Dist, SimError};
use crate::events::{EventRecord, EventSchema, Trajectory};
use crate::rng::SplitMix64;

/// Schema of a single-class, single-server queue: {arrival, departure}.
pub(crate) fn gg1_schema() -> EventSchema {
    super::MmnConfig::mm1(1.0, 1.0).schema()
}

/// Simulate a FIFO G/G/1 queue from the empty state.
///
/// Service times are drawn when a service starts; when a departure and an
/// arrival coincide the departure is processed first.
pub fn simulate_gg1(
    inter: &Dist,
    service: &Dist,
    n_events: usize,
    seed: u64,
) -> Result<Trajectory, SimError> {
    inter.validate()?;
    service.validate()?;
    let schema = gg1_schema();
    let initial = schema.empty_state();
    let mut state = initial.clone();
    let mut rng = SplitMix64::new(seed);

    let mut now = 0.0;
    let mut next_arrival = inter.sample(&mut rng);
    let mut in_service_until: Option<f64> = None;
    let mut records = Vec::with_capacity(n_events);

    for i in 0..n_events {
        let rec = match in_service_until {
            Some(fin) if fin <= next_arrival => {
                let rec = EventRecord {
                    dt: fin - now,
                    event: 1,
                    class: None,
                };
                now = fin;
                in_service_until = None;
                rec
            }
            _ => {
                let rec = EventRecord {
                    dt: next_arrival - now,
                    event: 0,
                    class: None,
                };
                now = next_arrival;
                next_arrival = now + inter.sample(&mut rng);
                rec
            }
        };
        schema
            .apply(&mut state, i, &rec)
            .expect("simulator transitions are valid by construction");
        // A service is running iff the server is busy after the event;
        // draw its duration when it just started.
        if state.nodes[0].busy_servers() > 0 && in_service_until.is_none() {
            in_service_until = Some(now + service.sample(&mut rng));
        }
        records.push(rec);
    }

    let mut traj = Trajectory::new(initial, records);
    traj.meta.insert("generator".into(), "gg1".into());
    traj.meta.insert("seed".into(), seed.into());
    Ok(traj)
}
