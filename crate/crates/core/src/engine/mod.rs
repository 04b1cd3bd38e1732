//! Single-node broker engine.
//!
//! Connections are pinned at accept time to one I/O shard and one worker
//! shard, both chosen by hashing the client address. I/O shards own the
//! sockets and decode frames; workers own the per-connection protocol state
//! and the topic-to-subscriber index for their connections. The message
//! cache is shared by all workers and the replication layer, and is locked
//! per topic group.

mod accept;
mod cache;
mod outbound;
mod worker;

use std::time::Duration;

use thiserror::Error;

pub use accept::{Acceptor, Assignment};
pub use cache::{AppendOutcome, CacheRead, CachedEntry, LockStats, TopicCache};
pub use outbound::OutboundBudget;
pub use worker::{
    conflate_flush, keep_latest, Origin, PublishRequest, Reducer, WorkerInput, WorkerOutput, WorkerShard,
    WorkerStats,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("connection limit of {0} reached")]
    ConnectionLimitReached(usize),
}

/// Outbound batching: frames for one client are held until `max_delay`
/// has passed since the first of them or `max_bytes` have accumulated.
/// A zero `max_delay` disables batching.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPolicy {
    pub max_delay: Duration,
    pub max_bytes: usize,
}

impl BatchPolicy {
    pub const DISABLED: BatchPolicy = BatchPolicy { max_delay: Duration::ZERO, max_bytes: 0 };

    pub fn enabled(&self) -> bool {
        !self.max_delay.is_zero()
    }
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self::DISABLED
    }
}

/// Per-topic conflation window for notifications.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConflationPolicy {
    pub window: Duration,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub io_threads: usize,
    pub workers: usize,
    pub num_groups: u32,
    pub cache_depth: usize,
    pub batch: BatchPolicy,
    pub conflation: Option<ConflationPolicy>,
    /// Bytes queued towards one client before it is disconnected.
    pub max_outbound_bytes: usize,
    pub max_connections: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self {
            io_threads: cpus,
            workers: cpus,
            num_groups: 100,
            cache_depth: 1000,
            batch: BatchPolicy::DISABLED,
            conflation: None,
            max_outbound_bytes: 4 << 20,
            max_connections: 1_000_000,
        }
    }
}
