//! One server as a single state machine: a [`ServerNode`] and one
//! [`WorkerShard`] sharing a cache. The multi-threaded runtime splits these
//! across threads; the simulator drives this composition directly.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;

use crate::cluster::{NodeConfig, NodeEvent, NodeOutput, ServerNode};
use crate::engine::{BatchPolicy, Origin, PublishRequest, TopicCache, WorkerInput, WorkerOutput, WorkerShard};
use crate::ids::{ConnectionId, ServerId};
use crate::wire::{encode_frame, CloseReason, Frame, Publish, Role};

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub node: NodeConfig,
    pub cache_depth: usize,
    pub batch: BatchPolicy,
}

impl BrokerConfig {
    pub fn new(node: NodeConfig) -> Self {
        Self { node, cache_depth: 1000, batch: BatchPolicy::DISABLED }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BrokerOutput {
    ToPeer { peer: ServerId, frame: Frame },
    ToClient { conn: ConnectionId, bytes: Bytes },
    /// The broker dropped this client; the bytes before it still go out.
    CloseClient { conn: ConnectionId, reason: CloseReason },
    /// Reply to a publication submitted with [`Broker::publish_local`].
    LocalReply { id: u64, frame: Frame },
    Event(NodeEvent),
}

pub struct Broker {
    node: ServerNode,
    worker: WorkerShard,
    scratch: Vec<WorkerOutput>,
    out: VecDeque<BrokerOutput>,
}

impl Broker {
    pub fn new(cfg: BrokerConfig, now: Duration) -> Self {
        Self::build(cfg, now, false)
    }

    /// A server coming back with an empty cache.
    pub fn restarted(cfg: BrokerConfig, now: Duration) -> Self {
        Self::build(cfg, now, true)
    }

    fn build(cfg: BrokerConfig, now: Duration, rejoin: bool) -> Self {
        let cache = Arc::new(TopicCache::new(cfg.node.num_groups, cfg.cache_depth));
        let id = cfg.node.id;
        let node = if rejoin {
            ServerNode::restarted(cfg.node, cache.clone(), now)
        } else {
            ServerNode::new(cfg.node, cache.clone(), now)
        };
        let mut b = Self {
            node,
            worker: WorkerShard::new(0, id, cache, cfg.batch),
            scratch: Vec::new(),
            out: VecDeque::new(),
        };
        b.pump(now);
        b
    }

    pub fn id(&self) -> ServerId {
        self.node.id()
    }

    pub fn node(&self) -> &ServerNode {
        &self.node
    }

    pub fn worker(&self) -> &WorkerShard {
        &self.worker
    }

    pub fn cache(&self) -> &Arc<TopicCache> {
        self.node.cache()
    }

    pub fn client_connected(&mut self, now: Duration, conn: ConnectionId, address: String) {
        let mut s = std::mem::take(&mut self.scratch);
        self.worker.handle(now, WorkerInput::Attach { conn, address }, &mut s);
        self.scratch = s;
        self.pump(now);
    }

    pub fn client_frame(&mut self, now: Duration, conn: ConnectionId, frame: Frame) {
        if matches!(frame, Frame::Connect { role: Role::Client, .. }) && !self.node.accepting_clients() {
            self.refuse(now, conn);
            return;
        }
        let mut s = std::mem::take(&mut self.scratch);
        self.worker.handle(now, WorkerInput::Frame { conn, frame }, &mut s);
        self.scratch = s;
        self.pump(now);
    }

    fn refuse(&mut self, now: Duration, conn: ConnectionId) {
        let bytes = encode_frame(&Frame::Close { reason: CloseReason::Unavailable }).expect("close frame encodes");
        self.out.push_back(BrokerOutput::ToClient { conn, bytes });
        self.out.push_back(BrokerOutput::CloseClient { conn, reason: CloseReason::Unavailable });
        let mut s = std::mem::take(&mut self.scratch);
        self.worker.handle(now, WorkerInput::Closed { conn }, &mut s);
        self.scratch = s;
        self.pump(now);
    }

    pub fn client_closed(&mut self, now: Duration, conn: ConnectionId) {
        let mut s = std::mem::take(&mut self.scratch);
        self.worker.handle(now, WorkerInput::Closed { conn }, &mut s);
        self.scratch = s;
        self.pump(now);
    }

    pub fn peer_frame(&mut self, now: Duration, from: ServerId, frame: Frame) {
        self.node.handle_peer_frame(now, from, frame);
        self.pump(now);
    }

    pub fn publish_local(&mut self, now: Duration, id: u64, publish: Publish) {
        self.node.handle_publish(now, PublishRequest { origin: Origin::Local(id), publish });
        self.pump(now);
    }

    pub fn tick(&mut self, now: Duration) {
        self.node.tick(now);
        let mut s = std::mem::take(&mut self.scratch);
        self.worker.poll_timers(now, &mut s);
        self.scratch = s;
        self.pump(now);
    }

    pub fn next_deadline(&self) -> Duration {
        let n = self.node.next_deadline();
        self.worker.next_deadline().map_or(n, |w| w.min(n))
    }

    pub fn drain(&mut self) -> impl Iterator<Item = BrokerOutput> + '_ {
        self.out.drain(..)
    }

    /// Routes outputs between node and worker until both are quiet.
    fn pump(&mut self, now: Duration) {
        loop {
            let mut progressed = false;
            let worker_out = std::mem::take(&mut self.scratch);
            for o in worker_out {
                progressed = true;
                match o {
                    WorkerOutput::Write { conn, bytes } => self.out.push_back(BrokerOutput::ToClient { conn, bytes }),
                    WorkerOutput::Close { conn, reason } => {
                        self.out.push_back(BrokerOutput::CloseClient { conn, reason })
                    }
                    WorkerOutput::Publish(req) => self.node.handle_publish(now, req),
                }
            }
            let node_out: Vec<NodeOutput> = self.node.drain().collect();
            let mut s = Vec::new();
            for o in node_out {
                progressed = true;
                match o {
                    NodeOutput::ToPeer { peer, frame } => self.out.push_back(BrokerOutput::ToPeer { peer, frame }),
                    NodeOutput::Reply { origin: Origin::Client { conn, .. }, frame } => {
                        self.worker.handle(now, WorkerInput::Reply { conn, frame }, &mut s)
                    }
                    NodeOutput::Reply { origin: Origin::Local(id), frame } => {
                        self.out.push_back(BrokerOutput::LocalReply { id, frame })
                    }
                    NodeOutput::Deliver(m) => self.worker.handle(now, WorkerInput::Deliver(m), &mut s),
                    NodeOutput::CloseClients(reason) => self.worker.handle(now, WorkerInput::CloseAll { reason }, &mut s),
                    NodeOutput::Event(e) => self.out.push_back(BrokerOutput::Event(e)),
                }
            }
            self.scratch = s;
            if !progressed {
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::{MsgId, OrderKey, TopicName};
    use crate::wire::DecodeBuffer;

    fn frames(b: &mut Broker, conn: ConnectionId) -> Vec<Frame> {
        let mut buf = DecodeBuffer::default();
        let mut got = Vec::new();
        for o in b.drain() {
            if let BrokerOutput::ToClient { conn: c, bytes } = o {
                if c == conn {
                    got.extend(buf.decode_frames(&bytes).unwrap());
                }
            }
        }
        got
    }

    #[test]
    fn single_server_round_trip() {
        let cfg = BrokerConfig::new(NodeConfig::new(ServerId(1), vec![ServerId(1)], 10));
        let mut now = Duration::ZERO;
        let mut b = Broker::new(cfg, now);
        while !b.node().accepting_clients() {
            now = b.next_deadline().max(now + Duration::from_millis(1));
            b.tick(now);
        }
        b.drain().for_each(drop);
        let c = ConnectionId(1);
        let t = TopicName::new("t").unwrap();
        b.client_connected(now, c, "10.0.0.1:1".into());
        b.client_frame(now, c, Frame::Connect { role: Role::Client, node: 0 });
        b.client_frame(now, c, Frame::Subscribe { topic: t.clone(), resume: OrderKey::ZERO });
        let publish = Publish { topic: t.clone(), msg_id: MsgId(5), ack_requested: true, payload: Bytes::from_static(b"x") };
        b.client_frame(now, c, Frame::Publish(publish));
        let got = frames(&mut b, c);
        assert!(matches!(got[0], Frame::ConnAck { .. }));
        assert!(got.contains(&Frame::PubAck { msg_id: MsgId(5), key: OrderKey::new(1, 1) }));
        assert!(got.iter().any(|f| matches!(f, Frame::Notify(m) if m.key == OrderKey::new(1, 1))));
    }

    #[test]
    fn refuses_clients_before_ready() {
        let members = vec![ServerId(1), ServerId(2), ServerId(3)];
        let mut b = Broker::new(BrokerConfig::new(NodeConfig::new(ServerId(1), members, 10)), Duration::ZERO);
        b.drain().for_each(drop);
        let c = ConnectionId(1);
        b.client_connected(Duration::ZERO, c, "a".into());
        b.client_frame(Duration::ZERO, c, Frame::Connect { role: Role::Client, node: 0 });
        let out: Vec<_> = b.drain().collect();
        assert!(out.contains(&BrokerOutput::CloseClient { conn: c, reason: CloseReason::Unavailable }));
    }
}
