//! Deterministic simulation of a migrant cluster and its clients.
//!
//! Every server and client is a sans-IO state machine from `migrant-core`;
//! the [`world::World`] moves bytes between them over virtual links with
//! seeded delays and injects faults from a [`scenario::Scenario`]. A run is
//! a pure function of the scenario and its seed.

pub mod assertions;
pub mod kv;
pub mod linearizability;
pub mod runner;
pub mod scenario;
pub mod trace;
pub mod world;

pub use runner::{run, sweep, Outcome, RunReport, SweepReport};
pub use scenario::{AssertionKind, Fault, Scenario};
