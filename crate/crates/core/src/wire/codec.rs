use bytes::{Buf, BufMut, Bytes, BytesMut};

use super::*;
use crate::coordkv::{Command, KvMessage, KvOp, LogEntry, SessionId};

/// Encodes a frame into a fresh buffer.
pub fn encode_frame(frame: &Frame) -> Result<Bytes, WireError> {
    let mut buf = BytesMut::with_capacity(64);
    encode_into(frame, &mut buf)?;
    Ok(buf.freeze())
}

/// Appends the encoding of `frame` to `buf`. On error `buf` is left as it
/// was before the call.
pub fn encode_into(frame: &Frame, buf: &mut BytesMut) -> Result<(), WireError> {
    let start = buf.len();
    buf.put_u32(0);
    buf.put_u8(frame.kind() as u8);
    if let Err(e) = encode_body(frame, buf) {
        buf.truncate(start);
        return Err(e);
    }
    let size = buf.len() - start;
    if size > MAX_FRAME {
        buf.truncate(start);
        return Err(WireError::OversizeFrame { size });
    }
    let len = (size - LEN_PREFIX) as u32;
    buf[start..start + LEN_PREFIX].copy_from_slice(&len.to_be_bytes());
    Ok(())
}

fn put_str(buf: &mut BytesMut, s: &str, what: &'static str) -> Result<(), WireError> {
    let len = u16::try_from(s.len()).map_err(|_| WireError::FieldTooLong(what))?;
    buf.put_u16(len);
    buf.put_slice(s.as_bytes());
    Ok(())
}

fn put_payload(buf: &mut BytesMut, p: &[u8]) -> Result<(), WireError> {
    let len = u16::try_from(p.len()).map_err(|_| WireError::FieldTooLong("payload"))?;
    buf.put_u16(len);
    buf.put_slice(p);
    Ok(())
}

fn put_key(buf: &mut BytesMut, k: OrderKey) {
    buf.put_u64(k.epoch);
    buf.put_u64(k.seq);
}

fn put_count(buf: &mut BytesMut, n: usize) -> Result<(), WireError> {
    buf.put_u32(u32::try_from(n).map_err(|_| WireError::FieldTooLong("count"))?);
    Ok(())
}

fn put_message(buf: &mut BytesMut, m: &Message) -> Result<(), WireError> {
    put_str(buf, m.topic.as_str(), "topic")?;
    put_key(buf, m.key);
    buf.put_u128(m.msg_id.0);
    put_payload(buf, &m.payload)
}

fn encode_body(frame: &Frame, buf: &mut BytesMut) -> Result<(), WireError> {
    match frame {
        Frame::Connect { role, node } => {
            buf.put_u8(*role as u8);
            buf.put_u16(*node);
        }
        Frame::ConnAck { server } => buf.put_u16(server.0),
        Frame::Subscribe { topic, resume } => {
            put_str(buf, topic.as_str(), "topic")?;
            put_key(buf, *resume);
        }
        Frame::SubAck { topic, head } => {
            put_str(buf, topic.as_str(), "topic")?;
            put_key(buf, *head);
        }
        Frame::Publish(p) => {
            put_str(buf, p.topic.as_str(), "topic")?;
            buf.put_u128(p.msg_id.0);
            buf.put_u8(u8::from(p.ack_requested));
            put_payload(buf, &p.payload)?;
        }
        Frame::PubAck { msg_id, key } => {
            buf.put_u128(msg_id.0);
            put_key(buf, *key);
        }
        Frame::PubNack { msg_id, reason, owner } => {
            buf.put_u128(msg_id.0);
            buf.put_u8(*reason as u8);
            match owner {
                Some(s) => {
                    buf.put_u8(1);
                    buf.put_u16(s.0);
                }
                None => {
                    buf.put_u8(0);
                    buf.put_u16(0);
                }
            }
        }
        Frame::Notify(m) => put_message(buf, m)?,
        Frame::Recover { topic, after } => {
            put_str(buf, topic.as_str(), "topic")?;
            put_key(buf, *after);
        }
        Frame::RecoverEnd { topic, truncated } => {
            put_str(buf, topic.as_str(), "topic")?;
            buf.put_u8(u8::from(*truncated));
        }
        Frame::Ping | Frame::Pong => {}
        Frame::Replicate(c) => {
            put_message(buf, &c.message)?;
            put_key(buf, c.prev);
        }
        Frame::ReplAck { topic, key } => {
            put_str(buf, topic.as_str(), "topic")?;
            put_key(buf, *key);
        }
        Frame::CoordGossip(g) => encode_gossip(g, buf)?,
        Frame::ReconcileReq(r) => {
            buf.put_u64(r.request);
            buf.put_u32(r.group.index());
            put_count(buf, r.known.len())?;
            for (topic, key) in &r.known {
                put_str(buf, topic.as_str(), "topic")?;
                put_key(buf, *key);
            }
        }
        Frame::ReconcileRsp(r) => {
            buf.put_u64(r.request);
            buf.put_u32(r.group.index());
            buf.put_u8(u8::from(r.last));
            put_count(buf, r.entries.len())?;
            for c in &r.entries {
                put_message(buf, &c.message)?;
                put_key(buf, c.prev);
            }
        }
        Frame::Close { reason } => buf.put_u8(*reason as u8),
    }
    Ok(())
}

const GOSSIP_ANNOUNCE: u8 = 0;
const KV_PREVOTE: u8 = 1;
const KV_PREVOTE_REPLY: u8 = 2;
const KV_VOTE: u8 = 3;
const KV_VOTE_REPLY: u8 = 4;
const KV_APPEND: u8 = 5;
const KV_APPEND_REPLY: u8 = 6;
const KV_PROPOSE: u8 = 7;

fn encode_gossip(g: &Gossip, buf: &mut BytesMut) -> Result<(), WireError> {
    match g {
        Gossip::Announce { group, owner, epoch } => {
            buf.put_u8(GOSSIP_ANNOUNCE);
            buf.put_u32(group.index());
            buf.put_u16(owner.0);
            buf.put_u64(*epoch);
        }
        Gossip::Kv(m) => match m {
            KvMessage::PreVote { term, last_index, last_term } => {
                buf.put_u8(KV_PREVOTE);
                buf.put_u64(*term);
                buf.put_u64(*last_index);
                buf.put_u64(*last_term);
            }
            KvMessage::PreVoteReply { term, granted } => {
                buf.put_u8(KV_PREVOTE_REPLY);
                buf.put_u64(*term);
                buf.put_u8(u8::from(*granted));
            }
            KvMessage::Vote { term, last_index, last_term } => {
                buf.put_u8(KV_VOTE);
                buf.put_u64(*term);
                buf.put_u64(*last_index);
                buf.put_u64(*last_term);
            }
            KvMessage::VoteReply { term, granted } => {
                buf.put_u8(KV_VOTE_REPLY);
                buf.put_u64(*term);
                buf.put_u8(u8::from(*granted));
            }
            KvMessage::Append { term, prev_index, prev_term, commit, entries } => {
                buf.put_u8(KV_APPEND);
                buf.put_u64(*term);
                buf.put_u64(*prev_index);
                buf.put_u64(*prev_term);
                buf.put_u64(*commit);
                put_count(buf, entries.len())?;
                for e in entries {
                    buf.put_u64(e.term);
                    encode_command(&e.command, buf)?;
                }
            }
            KvMessage::AppendReply { term, success, match_index } => {
                buf.put_u8(KV_APPEND_REPLY);
                buf.put_u64(*term);
                buf.put_u8(u8::from(*success));
                buf.put_u64(*match_index);
            }
            KvMessage::Propose { command } => {
                buf.put_u8(KV_PROPOSE);
                encode_command(command, buf)?;
            }
        },
    }
    Ok(())
}

fn encode_command(c: &Command, buf: &mut BytesMut) -> Result<(), WireError> {
    buf.put_u16(c.origin.0);
    buf.put_u64(c.request);
    match &c.op {
        KvOp::Noop => buf.put_u8(0),
        KvOp::OpenSession => buf.put_u8(1),
        KvOp::ExpireSession { session } => {
            buf.put_u8(2);
            buf.put_u64(session.0);
        }
        KvOp::CreateEphemeral { key, value, session } => {
            buf.put_u8(3);
            put_str(buf, key, "kv key")?;
            put_payload(buf, value)?;
            buf.put_u64(session.0);
        }
        KvOp::Delete { key } => {
            buf.put_u8(4);
            put_str(buf, key, "kv key")?;
        }
        KvOp::Cas { key, expected, new } => {
            buf.put_u8(5);
            put_str(buf, key, "kv key")?;
            buf.put_u64(*expected);
            buf.put_u64(*new);
        }
    }
    Ok(())
}

/// Cursor over a frame body. Every read is bounds-checked and reports
/// truncation as [`WireError::MalformedFrame`].
struct Reader {
    buf: Bytes,
}

fn malformed(what: impl Into<String>) -> WireError {
    WireError::MalformedFrame(what.into())
}

impl Reader {
    fn need(&self, n: usize, what: &str) -> Result<(), WireError> {
        if self.buf.remaining() < n {
            return Err(malformed(format!("truncated {what}")));
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8, WireError> {
        self.need(1, what)?;
        Ok(self.buf.get_u8())
    }

    fn u16(&mut self, what: &str) -> Result<u16, WireError> {
        self.need(2, what)?;
        Ok(self.buf.get_u16())
    }

    fn u32(&mut self, what: &str) -> Result<u32, WireError> {
        self.need(4, what)?;
        Ok(self.buf.get_u32())
    }

    fn u64(&mut self, what: &str) -> Result<u64, WireError> {
        self.need(8, what)?;
        Ok(self.buf.get_u64())
    }

    fn u128(&mut self, what: &str) -> Result<u128, WireError> {
        self.need(16, what)?;
        Ok(self.buf.get_u128())
    }

    fn flag(&mut self, what: &str) -> Result<bool, WireError> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(malformed(format!("{what}: invalid flag {b}"))),
        }
    }

    fn bytes(&mut self, what: &str) -> Result<Bytes, WireError> {
        let len = usize::from(self.u16(what)?);
        self.need(len, what)?;
        Ok(self.buf.split_to(len))
    }

    fn string(&mut self, what: &str) -> Result<String, WireError> {
        let raw = self.bytes(what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| malformed(format!("{what}: invalid UTF-8")))
    }

    fn topic(&mut self) -> Result<TopicName, WireError> {
        let s = self.string("topic")?;
        TopicName::new(s).map_err(|e| malformed(format!("topic: {e}")))
    }

    fn key(&mut self) -> Result<OrderKey, WireError> {
        Ok(OrderKey::new(self.u64("epoch")?, self.u64("seq")?))
    }

    fn msg_id(&mut self) -> Result<MsgId, WireError> {
        Ok(MsgId(self.u128("msg id")?))
    }

    fn count(&mut self, min_item: usize) -> Result<usize, WireError> {
        let n = self.u32("count")? as usize;
        // reject counts that cannot possibly fit in what is left
        if n.saturating_mul(min_item) > self.buf.remaining() {
            return Err(malformed("count exceeds body"));
        }
        Ok(n)
    }

    fn message(&mut self) -> Result<Message, WireError> {
        let topic = self.topic()?;
        let key = self.key()?;
        let msg_id = self.msg_id()?;
        let payload = self.bytes("payload")?;
        Ok(Message { topic, key, payload, msg_id })
    }

    fn command(&mut self) -> Result<Command, WireError> {
        let origin = ServerId(self.u16("origin")?);
        let request = self.u64("request")?;
        let op = match self.u8("kv op")? {
            0 => KvOp::Noop,
            1 => KvOp::OpenSession,
            2 => KvOp::ExpireSession { session: SessionId(self.u64("session")?) },
            3 => KvOp::CreateEphemeral {
                key: self.string("kv key")?,
                value: self.bytes("kv value")?,
                session: SessionId(self.u64("session")?),
            },
            4 => KvOp::Delete { key: self.string("kv key")? },
            5 => KvOp::Cas {
                key: self.string("kv key")?,
                expected: self.u64("expected")?,
                new: self.u64("new")?,
            },
            t => return Err(malformed(format!("unknown kv op {t}"))),
        };
        Ok(Command { origin, request, op })
    }

    fn finish(self, frame: Frame) -> Result<Frame, WireError> {
        if self.buf.has_remaining() {
            return Err(malformed(format!("{} trailing bytes in {:?}", self.buf.remaining(), frame.kind())));
        }
        Ok(frame)
    }
}

/// Decodes the kind byte and body of one frame (everything after the
/// length prefix).
pub fn decode_frame_body(body: Bytes) -> Result<Frame, WireError> {
    let mut r = Reader { buf: body };
    let kind_byte = r.u8("kind")?;
    let kind = FrameKind::from_u8(kind_byte).ok_or_else(|| malformed(format!("unknown kind {kind_byte}")))?;
    let frame = match kind {
        FrameKind::Connect => {
            let role = match r.u8("role")? {
                0 => Role::Client,
                1 => Role::Peer,
                b => return Err(malformed(format!("unknown role {b}"))),
            };
            Frame::Connect { role, node: r.u16("node")? }
        }
        FrameKind::ConnAck => Frame::ConnAck { server: ServerId(r.u16("server")?) },
        FrameKind::Subscribe => Frame::Subscribe { topic: r.topic()?, resume: r.key()? },
        FrameKind::SubAck => Frame::SubAck { topic: r.topic()?, head: r.key()? },
        FrameKind::Publish => Frame::Publish(Publish {
            topic: r.topic()?,
            msg_id: r.msg_id()?,
            ack_requested: r.flag("ack flag")?,
            payload: r.bytes("payload")?,
        }),
        FrameKind::PubAck => Frame::PubAck { msg_id: r.msg_id()?, key: r.key()? },
        FrameKind::PubNack => {
            let msg_id = r.msg_id()?;
            let reason_byte = r.u8("nack reason")?;
            let reason = NackReason::from_u8(reason_byte)
                .ok_or_else(|| malformed(format!("unknown nack reason {reason_byte}")))?;
            let has_owner = r.flag("owner flag")?;
            let owner = r.u16("owner")?;
            Frame::PubNack { msg_id, reason, owner: has_owner.then_some(ServerId(owner)) }
        }
        FrameKind::Notify => Frame::Notify(r.message()?),
        FrameKind::Recover => Frame::Recover { topic: r.topic()?, after: r.key()? },
        FrameKind::RecoverEnd => Frame::RecoverEnd { topic: r.topic()?, truncated: r.flag("truncated")? },
        FrameKind::Ping => Frame::Ping,
        FrameKind::Pong => Frame::Pong,
        FrameKind::Replicate => {
            let message = r.message()?;
            Frame::Replicate(ChainedMessage { message, prev: r.key()? })
        }
        FrameKind::ReplAck => Frame::ReplAck { topic: r.topic()?, key: r.key()? },
        FrameKind::CoordGossip => Frame::CoordGossip(decode_gossip(&mut r)?),
        FrameKind::ReconcileReq => {
            let request = r.u64("request")?;
            let group = GroupId::from_raw(r.u32("group")?);
            let n = r.count(2 + 1 + 16)?;
            let mut known = Vec::with_capacity(n);
            for _ in 0..n {
                known.push((r.topic()?, r.key()?));
            }
            Frame::ReconcileReq(ReconcileRequest { request, group, known })
        }
        FrameKind::ReconcileRsp => {
            let request = r.u64("request")?;
            let group = GroupId::from_raw(r.u32("group")?);
            let last = r.flag("last flag")?;
            let n = r.count(2 + 1 + 16 + 16 + 2 + 16)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let message = r.message()?;
                entries.push(ChainedMessage { message, prev: r.key()? });
            }
            Frame::ReconcileRsp(ReconcileResponse { request, group, last, entries })
        }
        FrameKind::Close => {
            let b = r.u8("close reason")?;
            Frame::Close {
                reason: CloseReason::from_u8(b).ok_or_else(|| malformed(format!("unknown close reason {b}")))?,
            }
        }
    };
    r.finish(frame)
}

fn decode_gossip(r: &mut Reader) -> Result<Gossip, WireError> {
    Ok(match r.u8("gossip kind")? {
        GOSSIP_ANNOUNCE => Gossip::Announce {
            group: GroupId::from_raw(r.u32("group")?),
            owner: ServerId(r.u16("owner")?),
            epoch: r.u64("epoch")?,
        },
        KV_PREVOTE => Gossip::Kv(KvMessage::PreVote {
            term: r.u64("term")?,
            last_index: r.u64("last index")?,
            last_term: r.u64("last term")?,
        }),
        KV_PREVOTE_REPLY => Gossip::Kv(KvMessage::PreVoteReply { term: r.u64("term")?, granted: r.flag("granted")? }),
        KV_VOTE => Gossip::Kv(KvMessage::Vote {
            term: r.u64("term")?,
            last_index: r.u64("last index")?,
            last_term: r.u64("last term")?,
        }),
        KV_VOTE_REPLY => Gossip::Kv(KvMessage::VoteReply { term: r.u64("term")?, granted: r.flag("granted")? }),
        KV_APPEND => {
            let term = r.u64("term")?;
            let prev_index = r.u64("prev index")?;
            let prev_term = r.u64("prev term")?;
            let commit = r.u64("commit")?;
            let n = r.count(8 + 2 + 8 + 1)?;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let term = r.u64("entry term")?;
                entries.push(LogEntry { term, command: r.command()? });
            }
            Gossip::Kv(KvMessage::Append { term, prev_index, prev_term, commit, entries })
        }
        KV_APPEND_REPLY => Gossip::Kv(KvMessage::AppendReply {
            term: r.u64("term")?,
            success: r.flag("success")?,
            match_index: r.u64("match index")?,
        }),
        KV_PROPOSE => Gossip::Kv(KvMessage::Propose { command: r.command()? }),
        k => return Err(malformed(format!("unknown gossip kind {k}"))),
    })
}

/// Per-connection reassembly buffer for frames split across reads.
#[derive(Debug, Default)]
pub struct DecodeBuffer {
    pending: BytesMut,
}

impl DecodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes received but not yet part of a complete frame.
    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Appends `incoming` and returns every frame completed by it, in
    /// arrival order. After an error the connection must be closed; the
    /// buffer contents are unspecified.
    pub fn decode_frames(&mut self, incoming: &[u8]) -> Result<Vec<Frame>, WireError> {
        let mut frames = Vec::new();
        self.decode_into(incoming, &mut frames)?;
        Ok(frames)
    }

    pub fn decode_into(&mut self, incoming: &[u8], frames: &mut Vec<Frame>) -> Result<(), WireError> {
        self.pending.extend_from_slice(incoming);
        loop {
            if self.pending.len() < LEN_PREFIX {
                return Ok(());
            }
            let len = u32::from_be_bytes(self.pending[..LEN_PREFIX].try_into().unwrap()) as usize;
            // checked before any body byte is buffered beyond this read
            if len == 0 {
                return Err(malformed("zero length prefix"));
            }
            if len > MAX_FRAME - LEN_PREFIX {
                return Err(malformed(format!("length prefix {len} exceeds frame limit")));
            }
            if self.pending.len() < LEN_PREFIX + len {
                return Ok(());
            }
            self.pending.advance(LEN_PREFIX);
            let body = self.pending.split_to(len).freeze();
            frames.push(decode_frame_body(body)?);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topic(s: &str) -> TopicName {
        TopicName::new(s).unwrap()
    }

    #[test]
    fn ping_is_five_bytes() {
        let b = encode_frame(&Frame::Ping).unwrap();
        assert_eq!(&b[..], &[0, 0, 0, 1, FrameKind::Ping as u8]);
    }

    #[test]
    fn notify_layout_matches_byte_oracle() {
        let m = Message::new(topic("t"), OrderKey::new(2, 7), Bytes::from_static(b"hi"), MsgId(0xAB));
        let got = encode_frame(&Frame::Notify(m)).unwrap();
        // hand-assembled from the documented layout
        let mut want: Vec<u8> = Vec::new();
        let body_len: u32 = 1 + (2 + 1) + 16 + 16 + (2 + 2);
        want.extend_from_slice(&body_len.to_be_bytes());
        want.push(8);
        want.extend_from_slice(&[0, 1, b't']);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 2]);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 7]);
        want.extend_from_slice(&[0; 15]);
        want.push(0xAB);
        want.extend_from_slice(&[0, 2, b'h', b'i']);
        assert_eq!(&got[..], &want[..]);
    }

    #[test]
    fn publish_round_trip_with_140_byte_payload() {
        let f = Frame::Publish(Publish {
            topic: topic("scores"),
            msg_id: MsgId(42),
            ack_requested: true,
            payload: Bytes::from(vec![7u8; 140]),
        });
        let bytes = encode_frame(&f).unwrap();
        let frames = DecodeBuffer::new().decode_frames(&bytes).unwrap();
        assert_eq!(frames, vec![f]);
    }

    #[test]
    fn empty_input_yields_nothing() {
        assert!(DecodeBuffer::new().decode_frames(&[]).unwrap().is_empty());
    }

    #[test]
    fn concatenated_pings() {
        let mut both = encode_frame(&Frame::Ping).unwrap().to_vec();
        both.extend_from_slice(&encode_frame(&Frame::Ping).unwrap());
        assert_eq!(DecodeBuffer::new().decode_frames(&both).unwrap(), vec![Frame::Ping, Frame::Ping]);
    }

    #[test]
    fn byte_at_a_time_completes_on_last_byte() {
        let f = Frame::Subscribe { topic: topic("x"), resume: OrderKey::new(1, 3) };
        let bytes = encode_frame(&f).unwrap();
        let mut d = DecodeBuffer::new();
        for (i, b) in bytes.iter().enumerate() {
            let out = d.decode_frames(std::slice::from_ref(b)).unwrap();
            if i + 1 < bytes.len() {
                assert!(out.is_empty());
            } else {
                assert_eq!(out, vec![f.clone()]);
            }
        }
        assert_eq!(d.pending_len(), 0);
    }

    #[test]
    fn oversize_prefix_rejected_before_body() {
        let mut d = DecodeBuffer::new();
        let prefix = ((MAX_FRAME as u32) + 1).to_be_bytes();
        assert!(matches!(d.decode_frames(&prefix), Err(WireError::MalformedFrame(_))));
    }

    #[test]
    fn unknown_kind_rejected() {
        let mut d = DecodeBuffer::new();
        assert!(d.decode_frames(&[0, 0, 0, 1, 99]).is_err());
        let mut d = DecodeBuffer::new();
        assert!(d.decode_frames(&[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut d = DecodeBuffer::new();
        assert!(d.decode_frames(&[0, 0, 0, 2, FrameKind::Ping as u8, 0]).is_err());
    }

    #[test]
    fn oversize_encode_rejected() {
        let entries: Vec<ChainedMessage> = (0..20)
            .map(|i| ChainedMessage {
                message: Message::new(topic("big"), OrderKey::new(1, i + 1), vec![0u8; 65_000], MsgId(i as u128)),
                prev: OrderKey::new(1, i),
            })
            .collect();
        let f = Frame::ReconcileRsp(ReconcileResponse { request: 1, group: GroupId::from_raw(0), last: true, entries });
        assert!(matches!(encode_frame(&f), Err(WireError::OversizeFrame { .. })));
        let mut buf = BytesMut::from(&b"keep"[..]);
        assert!(encode_into(&f, &mut buf).is_err());
        assert_eq!(&buf[..], b"keep");
    }

    #[test]
    fn payload_over_limit_rejected() {
        let f = Frame::Publish(Publish {
            topic: topic("t"),
            msg_id: MsgId(1),
            ack_requested: false,
            payload: Bytes::from(vec![0u8; 65_536]),
        });
        assert_eq!(encode_frame(&f), Err(WireError::FieldTooLong("payload")));
    }
}
