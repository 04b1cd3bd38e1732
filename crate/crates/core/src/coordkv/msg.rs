use std::fmt;

use bytes::Bytes;
use serde::Serialize;

use crate::ids::ServerId;

/// Identifier of a coordination session: the log index of the command
/// that opened it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session#{}", self.0)
    }
}

/// A state-machine operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvOp {
    Noop,
    OpenSession,
    ExpireSession { session: SessionId },
    CreateEphemeral { key: String, value: Bytes, session: SessionId },
    Delete { key: String },
    Cas { key: String, expected: u64, new: u64 },
}

/// An operation tagged with the replica that proposed it, so that the
/// proposer can match the committed result and duplicates can be dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Command {
    pub origin: ServerId,
    pub request: u64,
    pub op: KvOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub term: u64,
    pub command: Command,
}

/// Replication traffic between coordination replicas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvMessage {
    PreVote { term: u64, last_index: u64, last_term: u64 },
    PreVoteReply { term: u64, granted: bool },
    Vote { term: u64, last_index: u64, last_term: u64 },
    VoteReply { term: u64, granted: bool },
    Append { term: u64, prev_index: u64, prev_term: u64, commit: u64, entries: Vec<LogEntry> },
    AppendReply { term: u64, success: bool, match_index: u64 },
    Propose { command: Command },
}
