//! Length-prefixed binary framing used on client and server links.
//!
//! Every frame is `length: u32 BE | kind: u8 | body`, where `length` counts
//! the kind byte plus the body. Integers are big-endian and fixed width,
//! strings are `u16` length + UTF-8, payloads are `u16` length + bytes and
//! an [`OrderKey`] is `epoch: u64 | seq: u64`. The full layout of each
//! body is documented in `docs/protocol.md`.

mod codec;
mod samples;

pub use codec::{decode_frame_body, encode_frame, encode_into, DecodeBuffer};
pub use samples::samples;

use bytes::Bytes;
use thiserror::Error;

use crate::coordkv::KvMessage;
use crate::ids::{GroupId, MsgId, OrderKey, ServerId, TopicName};
use crate::message::Message;

/// Upper bound on an encoded frame, prefix included.
pub const MAX_FRAME: usize = 1 << 20;
/// Size of the length prefix.
pub const LEN_PREFIX: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame of {size} bytes exceeds the {MAX_FRAME}-byte limit")]
    OversizeFrame { size: usize },
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("field too long to encode: {0}")]
    FieldTooLong(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Connect = 1,
    ConnAck = 2,
    Subscribe = 3,
    SubAck = 4,
    Publish = 5,
    PubAck = 6,
    PubNack = 7,
    Notify = 8,
    Recover = 9,
    RecoverEnd = 10,
    Ping = 11,
    Pong = 12,
    Replicate = 13,
    ReplAck = 14,
    CoordGossip = 15,
    ReconcileReq = 16,
    ReconcileRsp = 17,
    Close = 18,
}

impl FrameKind {
    pub const ALL: [FrameKind; 18] = [
        FrameKind::Connect,
        FrameKind::ConnAck,
        FrameKind::Subscribe,
        FrameKind::SubAck,
        FrameKind::Publish,
        FrameKind::PubAck,
        FrameKind::PubNack,
        FrameKind::Notify,
        FrameKind::Recover,
        FrameKind::RecoverEnd,
        FrameKind::Ping,
        FrameKind::Pong,
        FrameKind::Replicate,
        FrameKind::ReplAck,
        FrameKind::CoordGossip,
        FrameKind::ReconcileReq,
        FrameKind::ReconcileRsp,
        FrameKind::Close,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get(usize::from(b).checked_sub(1)?).copied()
    }

    /// Frames that only travel between cluster members.
    pub fn is_server_only(self) -> bool {
        matches!(
            self,
            FrameKind::Replicate
                | FrameKind::ReplAck
                | FrameKind::CoordGossip
                | FrameKind::ReconcileReq
                | FrameKind::ReconcileRsp
        )
    }
}

/// Who is on the other end of a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Client = 0,
    Peer = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum NackReason {
    /// The designated server could not become coordinator; see the owner hint.
    NotCoordinator = 1,
    Timeout = 2,
    Unavailable = 3,
    OwnershipLost = 4,
}

impl NackReason {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::NotCoordinator,
            2 => Self::Timeout,
            3 => Self::Unavailable,
            4 => Self::OwnershipLost,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CloseReason {
    Normal = 0,
    ProtocolViolation = 1,
    SlowConsumer = 2,
    Fenced = 3,
    Unavailable = 4,
    Shutdown = 5,
    ConnectionLimit = 6,
}

impl CloseReason {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            0 => Self::Normal,
            1 => Self::ProtocolViolation,
            2 => Self::SlowConsumer,
            3 => Self::Fenced,
            4 => Self::Unavailable,
            5 => Self::Shutdown,
            6 => Self::ConnectionLimit,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Publish {
    pub topic: TopicName,
    pub msg_id: MsgId,
    pub ack_requested: bool,
    pub payload: Bytes,
}

/// A message together with the key that precedes it in the sender's
/// history of the topic. Receivers use `prev` to detect gaps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainedMessage {
    pub message: Message,
    pub prev: OrderKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Gossip {
    /// `owner` now coordinates `group` under `epoch`.
    Announce { group: GroupId, owner: ServerId, epoch: u64 },
    /// Coordination-store replication traffic.
    Kv(KvMessage),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconcileRequest {
    pub request: u64,
    pub group: GroupId,
    /// Last key held by the requester for each topic it knows in the group.
    /// Topics absent from this list are sent in full.
    pub known: Vec<(TopicName, OrderKey)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconcileResponse {
    pub request: u64,
    pub group: GroupId,
    /// Set on the final chunk of a response.
    pub last: bool,
    pub entries: Vec<ChainedMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Connect { role: Role, node: u16 },
    ConnAck { server: ServerId },
    Subscribe { topic: TopicName, resume: OrderKey },
    /// `head` is the newest key the server holds for the topic.
    SubAck { topic: TopicName, head: OrderKey },
    Publish(Publish),
    PubAck { msg_id: MsgId, key: OrderKey },
    PubNack { msg_id: MsgId, reason: NackReason, owner: Option<ServerId> },
    Notify(Message),
    Recover { topic: TopicName, after: OrderKey },
    RecoverEnd { topic: TopicName, truncated: bool },
    Ping,
    Pong,
    Replicate(ChainedMessage),
    ReplAck { topic: TopicName, key: OrderKey },
    CoordGossip(Gossip),
    ReconcileReq(ReconcileRequest),
    ReconcileRsp(ReconcileResponse),
    Close { reason: CloseReason },
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::Connect { .. } => FrameKind::Connect,
            Frame::ConnAck { .. } => FrameKind::ConnAck,
            Frame::Subscribe { .. } => FrameKind::Subscribe,
            Frame::SubAck { .. } => FrameKind::SubAck,
            Frame::Publish(_) => FrameKind::Publish,
            Frame::PubAck { .. } => FrameKind::PubAck,
            Frame::PubNack { .. } => FrameKind::PubNack,
            Frame::Notify(_) => FrameKind::Notify,
            Frame::Recover { .. } => FrameKind::Recover,
            Frame::RecoverEnd { .. } => FrameKind::RecoverEnd,
            Frame::Ping => FrameKind::Ping,
            Frame::Pong => FrameKind::Pong,
            Frame::Replicate(_) => FrameKind::Replicate,
            Frame::ReplAck { .. } => FrameKind::ReplAck,
            Frame::CoordGossip(_) => FrameKind::CoordGossip,
            Frame::ReconcileReq(_) => FrameKind::ReconcileReq,
            Frame::ReconcileRsp(_) => FrameKind::ReconcileRsp,
            Frame::Close { .. } => FrameKind::Close,
        }
    }
}
