//! Worker shard: per-connection protocol state, the subscription index of
//! its connections, and outbound batching and conflation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use tracing::{debug, warn};

use super::{BatchPolicy, ConflationPolicy, TopicCache};
use crate::ids::{ConnectionId, OrderKey, ServerId, TopicName};
use crate::message::Message;
use crate::wire::{encode_frame, encode_into, CloseReason, Frame, Publish};

/// Folds the notifications pending for one topic during a conflation
/// window into the single one that is sent.
pub type Reducer = Arc<dyn Fn(&TopicName, &[Arc<Message>]) -> Arc<Message> + Send + Sync>;

/// Keep-latest conflation: the pending message with the greatest key.
///
/// # Panics
///
/// If `pending` is empty.
pub fn conflate_flush(_topic: &TopicName, pending: &[Arc<Message>]) -> Arc<Message> {
    pending.iter().max_by_key(|m| m.key).cloned().expect("conflation window with no messages")
}

pub fn keep_latest() -> Reducer {
    Arc::new(conflate_flush)
}

/// Where a publication entered the broker, so its acknowledgement can be
/// routed back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Client { worker: u32, conn: ConnectionId },
    /// Published through the admin API or another in-process caller.
    Local(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishRequest {
    pub origin: Origin,
    pub publish: Publish,
}

#[derive(Debug, Clone)]
pub enum WorkerInput {
    Attach { conn: ConnectionId, address: String },
    Frame { conn: ConnectionId, frame: Frame },
    /// The transport is gone.
    Closed { conn: ConnectionId },
    /// A message was appended to the cache; fan it out to subscribers.
    Deliver(Arc<Message>),
    /// A frame produced elsewhere for one of this worker's connections.
    Reply { conn: ConnectionId, frame: Frame },
    CloseAll { reason: CloseReason },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkerOutput {
    /// One I/O operation towards a client.
    Write { conn: ConnectionId, bytes: Bytes },
    /// Close the transport once preceding writes are flushed.
    Close { conn: ConnectionId, reason: CloseReason },
    Publish(PublishRequest),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStats {
    pub notifications: u64,
    pub writes: u64,
    pub bytes_out: u64,
    pub violations: u64,
    pub publishes: u64,
}

struct PendingBatch {
    buf: BytesMut,
    since: Duration,
}

struct PendingConflation {
    since: Duration,
    messages: Vec<Arc<Message>>,
}

struct ConnState {
    address: String,
    connected: bool,
    /// Newest key sent (or skipped as already known) per subscribed topic.
    topics: HashMap<TopicName, OrderKey>,
    batch: Option<PendingBatch>,
    conflated: BTreeMap<TopicName, PendingConflation>,
}

pub struct WorkerShard {
    index: u32,
    server: ServerId,
    cache: Arc<TopicCache>,
    batch: BatchPolicy,
    conflation: Option<(ConflationPolicy, Reducer)>,
    conns: BTreeMap<ConnectionId, ConnState>,
    subscribers: HashMap<TopicName, BTreeSet<ConnectionId>>,
    timers: BTreeSet<(Duration, ConnectionId)>,
    stats: WorkerStats,
}

impl WorkerShard {
    pub fn new(index: u32, server: ServerId, cache: Arc<TopicCache>, batch: BatchPolicy) -> Self {
        Self {
            index,
            server,
            cache,
            batch,
            conflation: None,
            conns: BTreeMap::new(),
            subscribers: HashMap::new(),
            timers: BTreeSet::new(),
            stats: WorkerStats::default(),
        }
    }

    pub fn with_conflation(mut self, policy: ConflationPolicy, reducer: Reducer) -> Self {
        self.conflation = Some((policy, reducer));
        self
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn stats(&self) -> WorkerStats {
        self.stats
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    pub fn owns(&self, conn: ConnectionId) -> bool {
        self.conns.contains_key(&conn)
    }

    pub fn subscriber_count(&self, topic: &TopicName) -> usize {
        self.subscribers.get(topic).map_or(0, BTreeSet::len)
    }

    pub fn next_deadline(&self) -> Option<Duration> {
        self.timers.first().map(|(t, _)| *t)
    }

    pub fn handle(&mut self, now: Duration, input: WorkerInput, out: &mut Vec<WorkerOutput>) {
        match input {
            WorkerInput::Attach { conn, address } => {
                self.conns.insert(
                    conn,
                    ConnState {
                        address,
                        connected: false,
                        topics: HashMap::new(),
                        batch: None,
                        conflated: BTreeMap::new(),
                    },
                );
            }
            WorkerInput::Frame { conn, frame } => self.on_frame(now, conn, frame, out),
            WorkerInput::Closed { conn } => self.detach(conn),
            WorkerInput::Deliver(m) => self.deliver_local(now, &m, out),
            WorkerInput::Reply { conn, frame } => {
                if self.conns.contains_key(&conn) {
                    self.send_frame(now, conn, &frame, out);
                }
            }
            WorkerInput::CloseAll { reason } => {
                let conns: Vec<_> = self.conns.keys().copied().collect();
                for conn in conns {
                    self.close(now, conn, reason, out);
                }
            }
        }
    }

    /// Flushes batches and conflation windows that are due.
    pub fn poll_timers(&mut self, now: Duration, out: &mut Vec<WorkerOutput>) {
        while let Some(&(at, conn)) = self.timers.first() {
            if at > now {
                break;
            }
            self.timers.pop_first();
            self.flush_due(now, conn, out);
        }
    }

    fn on_frame(&mut self, now: Duration, conn: ConnectionId, frame: Frame, out: &mut Vec<WorkerOutput>) {
        let Some(state) = self.conns.get_mut(&conn) else {
            debug!(%conn, "frame for unknown connection");
            return;
        };
        match (state.connected, frame) {
            (false, Frame::Connect { role: crate::wire::Role::Client, .. }) => {
                state.connected = true;
                self.send_frame(now, conn, &Frame::ConnAck { server: self.server }, out);
            }
            (true, Frame::Subscribe { topic, resume }) => self.subscribe(now, conn, topic, resume, out),
            (true, Frame::Recover { topic, after }) => {
                let read = self.cache.read_after(&topic, after);
                for m in &read.messages {
                    self.send_frame(now, conn, &Frame::Notify((**m).clone()), out);
                }
                let truncated = read.truncated;
                self.send_frame(now, conn, &Frame::RecoverEnd { topic, truncated }, out);
            }
            (true, Frame::Publish(publish)) => {
                self.stats.publishes += 1;
                out.push(WorkerOutput::Publish(PublishRequest {
                    origin: Origin::Client { worker: self.index, conn },
                    publish,
                }));
            }
            (_, Frame::Ping) => self.send_frame(now, conn, &Frame::Pong, out),
            (_, Frame::Pong) => {}
            (_, Frame::Close { .. }) => {
                self.flush_conn(conn, out);
                self.detach(conn);
                out.push(WorkerOutput::Close { conn, reason: CloseReason::Normal });
            }
            (_, other) => {
                self.stats.violations += 1;
                warn!(%conn, address = %state.address, kind = ?other.kind(), "protocol violation");
                self.close(now, conn, CloseReason::ProtocolViolation, out);
            }
        }
    }

    /// Registers the subscription, then replays cached messages newer than
    /// `resume` ahead of any live notification for the topic.
    fn subscribe(
        &mut self,
        now: Duration,
        conn: ConnectionId,
        topic: TopicName,
        resume: OrderKey,
        out: &mut Vec<WorkerOutput>,
    ) {
        let (head, read) = self.cache.subscribe_view(&topic, resume);
        self.send_frame(now, conn, &Frame::SubAck { topic: topic.clone(), head }, out);
        if read.truncated {
            self.send_frame(now, conn, &Frame::RecoverEnd { topic: topic.clone(), truncated: true }, out);
        }
        for m in &read.messages {
            self.stats.notifications += 1;
            self.send_frame(now, conn, &Frame::Notify((**m).clone()), out);
        }
        let last_sent = if resume.is_zero() {
            head
        } else {
            read.messages.last().map_or(resume, |m| m.key.max(resume))
        };
        if let Some(state) = self.conns.get_mut(&conn) {
            state.topics.insert(topic.clone(), last_sent);
            self.subscribers.entry(topic).or_default().insert(conn);
        }
    }

    /// Fans a cached message out to this worker's subscribers of its topic.
    pub fn deliver_local(&mut self, now: Duration, m: &Arc<Message>, out: &mut Vec<WorkerOutput>) {
        let Some(subs) = self.subscribers.get(&m.topic) else { return };
        let targets: Vec<ConnectionId> = subs.iter().copied().collect();
        let mut encoded: Option<Bytes> = None;
        for conn in targets {
            let Some(state) = self.conns.get_mut(&conn) else { continue };
            let Some(last) = state.topics.get_mut(&m.topic) else { continue };
            if m.key <= *last {
                continue;
            }
            *last = m.key;
            self.stats.notifications += 1;
            if let Some((policy, _)) = &self.conflation {
                let window = policy.window;
                let pending = state.conflated.entry(m.topic.clone()).or_insert_with(|| PendingConflation {
                    since: now,
                    messages: Vec::new(),
                });
                if pending.messages.is_empty() {
                    pending.since = now;
                    self.timers.insert((now + window, conn));
                }
                pending.messages.push(m.clone());
                continue;
            }
            let bytes = match &encoded {
                Some(b) => b.clone(),
                None => match encode_frame(&Frame::Notify((**m).clone())) {
                    Ok(b) => {
                        encoded = Some(b.clone());
                        b
                    }
                    Err(e) => {
                        warn!(topic = %m.topic, error = %e, "cannot encode notification");
                        return;
                    }
                },
            };
            self.enqueue(now, conn, bytes, out);
        }
    }

    fn send_frame(&mut self, now: Duration, conn: ConnectionId, frame: &Frame, out: &mut Vec<WorkerOutput>) {
        match encode_frame(frame) {
            Ok(bytes) => self.enqueue(now, conn, bytes, out),
            Err(e) => warn!(%conn, error = %e, "cannot encode frame"),
        }
    }

    fn enqueue(&mut self, now: Duration, conn: ConnectionId, bytes: Bytes, out: &mut Vec<WorkerOutput>) {
        if !self.batch.enabled() {
            self.stats.writes += 1;
            self.stats.bytes_out += bytes.len() as u64;
            out.push(WorkerOutput::Write { conn, bytes });
            return;
        }
        let Some(state) = self.conns.get_mut(&conn) else { return };
        let batch = state.batch.get_or_insert_with(|| {
            self.timers.insert((now + self.batch.max_delay, conn));
            PendingBatch { buf: BytesMut::new(), since: now }
        });
        batch.buf.extend_from_slice(&bytes);
        if batch.buf.len() >= self.batch.max_bytes {
            self.flush_conn(conn, out);
        }
    }

    fn flush_due(&mut self, now: Duration, conn: ConnectionId, out: &mut Vec<WorkerOutput>) {
        if let Some((policy, reducer)) = self.conflation.clone() {
            let due: Vec<TopicName> = self
                .conns
                .get(&conn)
                .map(|s| {
                    s.conflated
                        .iter()
                        .filter(|(_, p)| !p.messages.is_empty() && p.since + policy.window <= now)
                        .map(|(t, _)| t.clone())
                        .collect()
                })
                .unwrap_or_default();
            for topic in due {
                let Some(state) = self.conns.get_mut(&conn) else { break };
                let Some(pending) = state.conflated.remove(&topic) else { continue };
                let merged = reducer(&topic, &pending.messages);
                self.send_frame(now, conn, &Frame::Notify((*merged).clone()), out);
            }
        }
        let batch_due = self
            .conns
            .get(&conn)
            .and_then(|s| s.batch.as_ref())
            .is_some_and(|b| b.since + self.batch.max_delay <= now);
        if batch_due {
            self.flush_conn(conn, out);
        }
    }

    fn flush_conn(&mut self, conn: ConnectionId, out: &mut Vec<WorkerOutput>) {
        let Some(state) = self.conns.get_mut(&conn) else { return };
        if let Some(batch) = state.batch.take() {
            self.timers.remove(&(batch.since + self.batch.max_delay, conn));
            if !batch.buf.is_empty() {
                self.stats.writes += 1;
                self.stats.bytes_out += batch.buf.len() as u64;
                out.push(WorkerOutput::Write { conn, bytes: batch.buf.freeze() });
            }
        }
    }

    fn close(&mut self, _now: Duration, conn: ConnectionId, reason: CloseReason, out: &mut Vec<WorkerOutput>) {
        if !self.conns.contains_key(&conn) {
            return;
        }
        // the CLOSE frame goes after anything already batched
        if let Some(state) = self.conns.get_mut(&conn) {
            if let Some(batch) = state.batch.as_mut() {
                let _ = encode_into(&Frame::Close { reason }, &mut batch.buf);
            } else if let Ok(bytes) = encode_frame(&Frame::Close { reason }) {
                out.push(WorkerOutput::Write { conn, bytes });
            }
        }
        self.flush_conn(conn, out);
        self.detach(conn);
        out.push(WorkerOutput::Close { conn, reason });
    }

    fn detach(&mut self, conn: ConnectionId) {
        if let Some(state) = self.conns.remove(&conn) {
            for topic in state.topics.keys() {
                if let Some(set) = self.subscribers.get_mut(topic) {
                    set.remove(&conn);
                    if set.is_empty() {
                        self.subscribers.remove(topic);
                    }
                }
            }
            if let Some(b) = state.batch {
                self.timers.remove(&(b.since + self.batch.max_delay, conn));
            }
            self.timers.retain(|(_, c)| *c != conn);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::MsgId;
    use crate::wire::{DecodeBuffer, Role};

    const MS: Duration = Duration::from_millis(1);

    fn topic(s: &str) -> TopicName {
        TopicName::new(s).unwrap()
    }

    fn msg(t: &str, e: u64, s: u64) -> Arc<Message> {
        Arc::new(Message::new(topic(t), OrderKey::new(e, s), vec![1, 2, 3], MsgId(u128::from(s))))
    }

    fn frames_for(out: &[WorkerOutput], conn: ConnectionId) -> Vec<Frame> {
        let mut d = DecodeBuffer::new();
        out.iter()
            .filter_map(|o| match o {
                WorkerOutput::Write { conn: c, bytes } if *c == conn => Some(d.decode_frames(bytes).unwrap()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn writes_for(out: &[WorkerOutput], conn: ConnectionId) -> usize {
        out.iter().filter(|o| matches!(o, WorkerOutput::Write { conn: c, .. } if *c == conn)).count()
    }

    fn worker(cache: Arc<TopicCache>, batch: BatchPolicy) -> WorkerShard {
        WorkerShard::new(0, ServerId(1), cache, batch)
    }

    fn connect(w: &mut WorkerShard, conn: u64, out: &mut Vec<WorkerOutput>) -> ConnectionId {
        let c = ConnectionId(conn);
        w.handle(Duration::ZERO, WorkerInput::Attach { conn: c, address: format!("10.0.0.{conn}:1") }, out);
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Connect { role: Role::Client, node: 0 } }, out);
        c
    }

    #[test]
    fn publish_before_connect_is_a_violation() {
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), BatchPolicy::DISABLED);
        let mut out = Vec::new();
        let c = ConnectionId(1);
        w.handle(Duration::ZERO, WorkerInput::Attach { conn: c, address: "a".into() }, &mut out);
        let p = Publish { topic: topic("t"), msg_id: MsgId(1), ack_requested: true, payload: Bytes::new() };
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Publish(p) }, &mut out);
        assert_eq!(frames_for(&out, c), vec![Frame::Close { reason: CloseReason::ProtocolViolation }]);
        assert!(matches!(out.last(), Some(WorkerOutput::Close { reason: CloseReason::ProtocolViolation, .. })));
        assert!(!w.owns(c));
    }

    #[test]
    fn subscribe_then_publish_processed_in_order() {
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), BatchPolicy::DISABLED);
        let mut out = Vec::new();
        let c = connect(&mut w, 1, &mut out);
        out.clear();
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::ZERO } }, &mut out);
        let p = Publish { topic: topic("t"), msg_id: MsgId(1), ack_requested: true, payload: Bytes::new() };
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Publish(p.clone()) }, &mut out);
        assert!(matches!(&out[0], WorkerOutput::Write { .. }));
        assert_eq!(out[1], WorkerOutput::Publish(PublishRequest { origin: Origin::Client { worker: 0, conn: c }, publish: p }));
        assert_eq!(w.subscriber_count(&topic("t")), 1);
    }

    #[test]
    fn subscribe_on_empty_topic_sends_only_suback() {
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), BatchPolicy::DISABLED);
        let mut out = Vec::new();
        let c = connect(&mut w, 1, &mut out);
        out.clear();
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::ZERO } }, &mut out);
        assert_eq!(frames_for(&out, c), vec![Frame::SubAck { topic: topic("t"), head: OrderKey::ZERO }]);
    }

    #[test]
    fn resume_replays_cached_suffix() {
        let cache = Arc::new(TopicCache::new(4, 10));
        for s in 1..=5 {
            cache.append(msg("t", 1, s));
        }
        let mut w = worker(cache, BatchPolicy::DISABLED);
        let mut out = Vec::new();
        let c = connect(&mut w, 1, &mut out);
        out.clear();
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::new(1, 3) } }, &mut out);
        let frames = frames_for(&out, c);
        assert_eq!(frames[0], Frame::SubAck { topic: topic("t"), head: OrderKey::new(1, 5) });
        let keys: Vec<_> = frames[1..]
            .iter()
            .map(|f| match f {
                Frame::Notify(m) => m.key,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        assert_eq!(keys, vec![OrderKey::new(1, 4), OrderKey::new(1, 5)]);
        // a live delivery of an already replayed key is not repeated
        out.clear();
        w.handle(Duration::ZERO, WorkerInput::Deliver(msg("t", 1, 5)), &mut out);
        assert!(out.is_empty());
    }

    #[test]
    fn truncated_resume_flags_before_replay() {
        let cache = Arc::new(TopicCache::new(4, 5));
        for s in 1..=15 {
            cache.append(msg("t", 1, s));
        }
        let mut w = worker(cache, BatchPolicy::DISABLED);
        let mut out = Vec::new();
        let c = connect(&mut w, 1, &mut out);
        out.clear();
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::new(1, 3) } }, &mut out);
        let frames = frames_for(&out, c);
        assert_eq!(frames[1], Frame::RecoverEnd { topic: topic("t"), truncated: true });
        assert!(matches!(&frames[2], Frame::Notify(m) if m.key == OrderKey::new(1, 11)));
        assert_eq!(frames.len(), 2 + 5);
    }

    #[test]
    fn deliver_fans_out_identical_bodies() {
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), BatchPolicy::DISABLED);
        let mut out = Vec::new();
        w.handle(Duration::ZERO, WorkerInput::Deliver(msg("t", 1, 1)), &mut out);
        assert!(out.is_empty());
        let conns: Vec<_> = (1..=3).map(|i| connect(&mut w, i, &mut out)).collect();
        for &c in &conns {
            w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::ZERO } }, &mut out);
        }
        out.clear();
        w.handle(Duration::ZERO, WorkerInput::Deliver(msg("t", 1, 2)), &mut out);
        let bodies: Vec<&Bytes> = out
            .iter()
            .map(|o| match o {
                WorkerOutput::Write { bytes, .. } => bytes,
                _ => panic!(),
            })
            .collect();
        assert_eq!(bodies.len(), 3);
        assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn batching_coalesces_into_one_write() {
        let policy = BatchPolicy { max_delay: 10 * MS, max_bytes: 64 * 1024 };
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), policy);
        let mut out = Vec::new();
        let c = connect(&mut w, 1, &mut out);
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::ZERO } }, &mut out);
        w.poll_timers(20 * MS, &mut out);
        out.clear();
        w.handle(21 * MS, WorkerInput::Deliver(msg("t", 1, 1)), &mut out);
        w.handle(25 * MS, WorkerInput::Deliver(msg("t", 1, 2)), &mut out);
        assert!(out.is_empty());
        assert_eq!(w.next_deadline(), Some(31 * MS));
        w.poll_timers(30 * MS, &mut out);
        assert!(out.is_empty());
        w.poll_timers(31 * MS, &mut out);
        assert_eq!(writes_for(&out, c), 1);
        let keys: Vec<_> = frames_for(&out, c)
            .into_iter()
            .map(|f| match f {
                Frame::Notify(m) => m.key.seq,
                _ => 0,
            })
            .collect();
        assert_eq!(keys, vec![1, 2]);
    }

    #[test]
    fn batch_flushes_at_size_threshold() {
        let policy = BatchPolicy { max_delay: 1000 * MS, max_bytes: 100 };
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), policy);
        let mut out = Vec::new();
        let c = connect(&mut w, 1, &mut out);
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::ZERO } }, &mut out);
        out.clear();
        for s in 1..=3 {
            w.handle(MS, WorkerInput::Deliver(msg("t", 1, s)), &mut out);
        }
        // pending SUBACK and CONNACK plus notifications cross 100 bytes well before the timer
        assert!(writes_for(&out, c) >= 1);
    }

    #[test]
    fn conflation_sends_one_notification_per_window() {
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), BatchPolicy::DISABLED)
            .with_conflation(ConflationPolicy { window: 50 * MS }, keep_latest());
        let mut out = Vec::new();
        let c = connect(&mut w, 1, &mut out);
        w.handle(Duration::ZERO, WorkerInput::Frame { conn: c, frame: Frame::Subscribe { topic: topic("t"), resume: OrderKey::ZERO } }, &mut out);
        out.clear();
        for s in 1..=5 {
            w.handle(s * 5 * MS, WorkerInput::Deliver(msg("t", 1, u64::from(s))), &mut out);
        }
        w.poll_timers(54 * MS, &mut out);
        assert!(out.is_empty());
        w.poll_timers(55 * MS, &mut out);
        let frames = frames_for(&out, c);
        assert_eq!(frames.len(), 1);
        assert!(matches!(&frames[0], Frame::Notify(m) if m.key == OrderKey::new(1, 5)));
    }

    #[test]
    fn keep_latest_examples() {
        let t = topic("t");
        let m1 = msg("t", 1, 1);
        assert_eq!(conflate_flush(&t, std::slice::from_ref(&m1)), m1);
        let all = [msg("t", 1, 1), msg("t", 1, 2), msg("t", 1, 3)];
        assert_eq!(conflate_flush(&t, &all).key, OrderKey::new(1, 3));
    }

    #[test]
    fn close_all_sends_close_frames() {
        let mut w = worker(Arc::new(TopicCache::new(4, 10)), BatchPolicy::DISABLED);
        let mut out = Vec::new();
        let a = connect(&mut w, 1, &mut out);
        let b = connect(&mut w, 2, &mut out);
        out.clear();
        w.handle(Duration::ZERO, WorkerInput::CloseAll { reason: CloseReason::Fenced }, &mut out);
        for c in [a, b] {
            assert_eq!(frames_for(&out, c), vec![Frame::Close { reason: CloseReason::Fenced }]);
        }
        assert_eq!(w.connections(), 0);
    }
}
