//! Event-table toolkit for service systems: seedable discrete-event
//! simulators, exact Markovian oracles, a small autoregressive sequence
//! model over event streams, and the evaluation metrics tying them
//! together.
//!
//! The crate is organized around the event-table representation of a
//! queueing system: a trajectory is an initial state plus an ordered list
//! of `(dt, event, class)` records, and every system declares an
//! [`events::EventSchema`] that makes state reconstruction from the
//! records deterministic.

pub mod cli;
pub mod eval;
pub mod events;
pub mod io;
pub mod oracle;
pub mod queuesim;
pub mod rng;
pub mod seqmodel;
pub mod stats;
pub mod timedist;
