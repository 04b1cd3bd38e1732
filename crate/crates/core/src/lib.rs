//! Protocol core of the migrant topic-based publish/subscribe service.
//!
//! Everything in this crate is free of I/O. Each component is a state
//! machine that consumes inputs stamped with the caller's notion of "now"
//! and produces outputs for the caller to perform. The production runtime
//! (`migrant-server`, `migrant-client`) drives these machines with sockets
//! and real timers; the deterministic simulator (`migrant-simnet`) drives
//! the very same code with a virtual clock and seeded link delays.
//!
//! Layout:
//!
//! - [`ids`] and [`hash`]: identifiers, ordering keys, sharding hashes.
//! - [`wire`]: length-prefixed binary framing shared by all links.
//! - [`engine`]: the single-node broker (shard assignment, workers,
//!   group-locked topic cache, batching, conflation).
//! - [`coordkv`]: the embedded coordination store (ephemeral entries,
//!   watches, epoch counters) replicated across the cluster.
//! - [`cluster`]: coordinator election, sequencing, two-copy replication,
//!   reconciliation and partition fencing.
//! - [`client`]: the publisher/subscriber SDK state machine.
//! - [`broker`]: a single-threaded composition of engine and cluster used
//!   by the simulator.

pub mod broker;
pub mod client;
pub mod cluster;
pub mod coordkv;
pub mod engine;
pub mod hash;
pub mod ids;
pub mod message;
pub mod wire;

pub use hash::{client_shard, fnv1a64, topic_group};
pub use ids::{ConnectionId, GroupId, IdError, MsgId, OrderKey, ServerId, TopicName};
pub use message::Message;
