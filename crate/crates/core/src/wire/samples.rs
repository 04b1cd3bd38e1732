use bytes::Bytes;

use super::{ChainedMessage, CloseReason, Frame, Gossip, NackReason, Publish, ReconcileRequest, ReconcileResponse, Role};
use crate::coordkv::{Command, KvMessage, KvOp, LogEntry, SessionId};
use crate::ids::{GroupId, MsgId, OrderKey, ServerId, TopicName};
use crate::message::Message;

fn topic(s: &str) -> TopicName {
    TopicName::new(s).unwrap()
}

fn msg(t: &str, e: u64, s: u64, payload: &'static [u8]) -> Message {
    Message::new(topic(t), OrderKey::new(e, s), Bytes::from_static(payload), MsgId(0xfeed_0000 + u128::from(s)))
}

fn entry(term: u64, op: KvOp) -> LogEntry {
    LogEntry { term, command: Command { origin: ServerId(2), request: 77, op } }
}

/// One frame of every kind, and one per coordination message, with
/// representative field values. Used by tests and to document the format.
pub fn samples() -> Vec<Frame> {
    let kv = vec![
        KvMessage::PreVote { term: 3, last_index: 9, last_term: 2 },
        KvMessage::PreVoteReply { term: 3, granted: true },
        KvMessage::Vote { term: 4, last_index: 9, last_term: 2 },
        KvMessage::VoteReply { term: 4, granted: false },
        KvMessage::Append {
            term: 4,
            prev_index: 8,
            prev_term: 2,
            commit: 8,
            entries: vec![
                entry(4, KvOp::Noop),
                entry(4, KvOp::OpenSession),
                entry(4, KvOp::ExpireSession { session: SessionId(5) }),
                entry(4, KvOp::CreateEphemeral { key: "coord/7".into(), value: Bytes::from_static(b"\x00\x02"), session: SessionId(5) }),
                entry(4, KvOp::Delete { key: "coord/7".into() }),
                entry(4, KvOp::Cas { key: "epoch/7".into(), expected: 1, new: 2 }),
            ],
        },
        KvMessage::AppendReply { term: 4, success: true, match_index: 14 },
        KvMessage::Propose {
            command: Command { origin: ServerId(3), request: 1 << 40, op: KvOp::Cas { key: "epoch/1".into(), expected: 0, new: 1 } },
        },
    ];
    let mut frames = vec![
        Frame::Connect { role: Role::Client, node: 0 },
        Frame::Connect { role: Role::Peer, node: 3 },
        Frame::ConnAck { server: ServerId(1) },
        Frame::Subscribe { topic: topic("scores/soccer"), resume: OrderKey::new(2, 7) },
        Frame::SubAck { topic: topic("scores/soccer"), head: OrderKey::ZERO },
        Frame::Publish(Publish { topic: topic("t"), msg_id: MsgId(u128::MAX), ack_requested: true, payload: Bytes::from(vec![0xab; 140]) }),
        Frame::PubAck { msg_id: MsgId(1), key: OrderKey::new(1, 1) },
        Frame::PubNack { msg_id: MsgId(1), reason: NackReason::NotCoordinator, owner: Some(ServerId(3)) },
        Frame::PubNack { msg_id: MsgId(1), reason: NackReason::Timeout, owner: None },
        Frame::Notify(msg("t", 2, 7, b"hello")),
        Frame::Recover { topic: topic("t"), after: OrderKey::new(1, 3) },
        Frame::RecoverEnd { topic: topic("t"), truncated: true },
        Frame::Ping,
        Frame::Pong,
        Frame::Replicate(ChainedMessage { message: msg("t", 2, 1, b""), prev: OrderKey::new(1, 9) }),
        Frame::ReplAck { topic: topic("t"), key: OrderKey::new(2, 1) },
        Frame::CoordGossip(Gossip::Announce { group: GroupId::new(12, 100).unwrap(), owner: ServerId(2), epoch: 5 }),
        Frame::ReconcileReq(ReconcileRequest {
            request: 9,
            group: GroupId::new(3, 100).unwrap(),
            known: vec![(topic("a"), OrderKey::new(1, 4)), (topic("b"), OrderKey::ZERO)],
        }),
        Frame::ReconcileRsp(ReconcileResponse {
            request: 9,
            group: GroupId::new(3, 100).unwrap(),
            last: true,
            entries: vec![
                ChainedMessage { message: msg("a", 1, 5, b"x"), prev: OrderKey::new(1, 4) },
                ChainedMessage { message: msg("a", 1, 6, b"yy"), prev: OrderKey::new(1, 5) },
            ],
        }),
        Frame::Close { reason: CloseReason::Fenced },
    ];
    frames.extend(kv.into_iter().map(|m| Frame::CoordGossip(Gossip::Kv(m))));
    frames
}

