use std::fmt;
use std::time::Duration;

use migrant_core::cluster::Purpose;
use migrant_core::{fnv1a64, ConnectionId, GroupId, MsgId, OrderKey, ServerId};

use crate::scenario::Fault;

/// Index of a simulated client.
pub type ClientIdx = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Fault(Fault),
    Won { server: ServerId, group: GroupId, epoch: u64 },
    Assigned { server: ServerId, group: GroupId, epoch: u64, topic: usize, key: OrderKey },
    /// A server emitted a PUBACK; `copies` live caches held the message.
    AckEmitted { server: ServerId, topic: usize, key: OrderKey, copies: usize },
    /// Two live servers owned one group at the same instant.
    OwnerConflict { group: GroupId, owners: Vec<ServerId> },
    GapDetected { server: ServerId, group: GroupId },
    RoundFinished { server: ServerId, group: GroupId, purpose: Purpose, applied: usize },
    Fenced { server: ServerId },
    Rebuilding { server: ServerId },
    Ready { server: ServerId },
    ConnAttached { server: ServerId, conn: ConnectionId, client: ClientIdx },
    ConnClosedByServer { server: ServerId, conn: ConnectionId },
    ConnClosedByClient { server: ServerId, conn: ConnectionId },
    Published { client: ClientIdx, msg_id: MsgId, topic: usize, ack: bool },
    PubAcked { client: ClientIdx, msg_id: MsgId, key: OrderKey },
    PubFailed { client: ClientIdx, msg_id: MsgId },
    /// Application callback of a subscriber. `payload` is a hash.
    Delivered { client: ClientIdx, topic: usize, key: OrderKey, msg_id: MsgId, payload: u64 },
    Truncated { client: ClientIdx, topic: usize },
    ClientConnected { client: ClientIdx, server: ServerId },
    ClientDisconnected { client: ClientIdx, server: ServerId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub at: Duration,
    pub event: TraceEvent,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:>10.3}s] {:?}", self.at.as_secs_f64(), self.event)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    entries: Vec<TraceEntry>,
    hash: u64,
}

impl Trace {
    pub fn new() -> Self {
        Self { entries: Vec::new(), hash: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn push(&mut self, at: Duration, event: TraceEvent) {
        let e = TraceEntry { at, event };
        let line = e.to_string();
        self.hash = fnv1a64(&[&self.hash.to_be_bytes()[..], line.as_bytes()].concat());
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Chained FNV-1a over the rendered entries.
    pub fn hash(&self) -> u64 {
        self.hash
    }
}
