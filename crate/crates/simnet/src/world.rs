//! The simulated world: servers, clients, links and the event queue.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::Duration;

use bytes::Bytes;
use migrant_core::broker::{Broker, BrokerConfig, BrokerOutput};
use migrant_core::client::{ClientAction, ClientConfig, ClientCore, PublishOutcome, ServerList};
use migrant_core::cluster::{NodeConfig, NodeEvent};
use migrant_core::wire::{encode_frame, DecodeBuffer, Frame};
use migrant_core::{fnv1a64, ConnectionId, ServerId, TopicName};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracing::trace;

use crate::scenario::{Fault, Scenario, SimConfig, Workload};
use crate::trace::{ClientIdx, Trace, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Server(usize),
    Client(ClientIdx),
}

#[derive(Debug)]
enum Payload {
    Peer(Frame),
    Open { conn: ConnectionId },
    Opened { conn: ConnectionId, ok: bool },
    ToServer { conn: ConnectionId, bytes: Bytes },
    ToClient { conn: ConnectionId, bytes: Bytes },
    CloseFromClient { conn: ConnectionId },
    CloseFromServer { conn: ConnectionId },
}

#[derive(Debug)]
enum Event {
    Timer(Endpoint),
    Link { from: Endpoint, to: Endpoint, src_inc: Option<u32>, dst_inc: Option<u32>, payload: Payload },
    Fault(Fault),
    StartClients,
    Publish { client: ClientIdx, k: u64 },
}

struct Scheduled {
    at: Duration,
    idx: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.idx) == (o.at, o.idx)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.idx).cmp(&(o.at, o.idx))
    }
}

struct ServerSlot {
    id: ServerId,
    broker: Option<Broker>,
    incarnation: u32,
    timer_at: Option<Duration>,
    buffers: BTreeMap<ConnectionId, DecodeBuffer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientRole {
    Publisher,
    Subscriber,
}

struct ClientSlot {
    core: ClientCore,
    role: ClientRole,
    topics: Vec<usize>,
    conn: Option<ConnectionId>,
    buffer: DecodeBuffer,
    timer_at: Option<Duration>,
    started: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConnInfo {
    client: ClientIdx,
    server: usize,
    /// Server incarnation the connection was opened against.
    incarnation: u32,
    open: bool,
}

/// Counters of the work done by one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorldStats {
    pub events: u64,
    pub frames_dropped: u64,
    pub peer_frames: u64,
}

pub struct World {
    cfg: SimConfig,
    workload: Workload,
    now: Duration,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Scheduled>>,
    next_idx: u64,
    servers: Vec<ServerSlot>,
    clients: Vec<ClientSlot>,
    conns: BTreeMap<ConnectionId, ConnInfo>,
    next_conn: u64,
    link_last: BTreeMap<(Endpoint, Endpoint), Duration>,
    cut: BTreeSet<(usize, usize)>,
    drop_next: BTreeMap<(usize, usize), (u32, Option<migrant_core::wire::FrameKind>)>,
    topics: Vec<TopicName>,
    trace: Trace,
    stats: WorldStats,
}

fn mix(a: u64, b: u64) -> u64 {
    fnv1a64(&[a.to_be_bytes(), b.to_be_bytes()].concat())
}

impl World {
    pub fn new(sc: &Scenario) -> Self {
        let cfg = sc.config.clone();
        let workload = sc.workload.clone();
        let topics = (0..workload.topics).map(|i| TopicName::new(Workload::topic_name(i)).expect("valid")).collect();
        let mut w = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: Duration::ZERO,
            queue: BinaryHeap::new(),
            next_idx: 0,
            servers: Vec::new(),
            clients: Vec::new(),
            conns: BTreeMap::new(),
            next_conn: 1,
            link_last: BTreeMap::new(),
            cut: BTreeSet::new(),
            drop_next: BTreeMap::new(),
            topics,
            trace: Trace::new(),
            stats: WorldStats::default(),
            cfg,
            workload,
        };
        for i in 0..w.cfg.servers {
            let id = ServerId(i as u16 + 1);
            w.servers.push(ServerSlot { id, broker: None, incarnation: 0, timer_at: None, buffers: BTreeMap::new() });
        }
        for i in 0..w.cfg.servers {
            let broker = Broker::new(w.broker_config(i), Duration::ZERO);
            w.servers[i].broker = Some(broker);
            w.drive_server(i);
        }
        let server_list =
            ServerList::uniform((1..=w.cfg.servers).map(|i| format!("s{i}"))).expect("at least one server");
        let n_pub = w.workload.publishers;
        for c in 0..n_pub + w.workload.subscribers {
            let mut cc = ClientConfig::new(server_list.clone());
            cc.seed = mix(w.cfg.seed, 1_000_000 + c as u64);
            let (role, topics) = if c < n_pub {
                (ClientRole::Publisher, Vec::new())
            } else {
                (ClientRole::Subscriber, w.workload.topics_of(c - n_pub))
            };
            w.clients.push(ClientSlot {
                core: ClientCore::idle(cc),
                role,
                topics,
                conn: None,
                buffer: DecodeBuffer::new(),
                timer_at: None,
                started: false,
            });
        }
        if !w.clients.is_empty() {
            let at = w.workload.clients_start;
            w.schedule(at, Event::StartClients);
        }
        for (at, f) in sc.faults.events.clone() {
            w.schedule(at, Event::Fault(f));
        }
        w
    }

    fn broker_config(&self, i: usize) -> BrokerConfig {
        let members: Vec<ServerId> = (1..=self.cfg.servers).map(|s| ServerId(s as u16)).collect();
        let mut node = NodeConfig::new(ServerId(i as u16 + 1), members, self.cfg.num_groups);
        node.seed = mix(mix(self.cfg.seed, i as u64), u64::from(self.servers[i].incarnation));
        let mut b = BrokerConfig::new(node);
        b.cache_depth = self.cfg.cache_depth;
        b
    }

    pub fn now(&self) -> Duration {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn stats(&self) -> WorldStats {
        self.stats
    }

    pub fn broker(&self, server: usize) -> Option<&Broker> {
        self.servers.get(server).and_then(|s| s.broker.as_ref())
    }

    pub fn servers(&self) -> usize {
        self.servers.len()
    }

    pub fn client_outstanding(&self) -> usize {
        self.clients.iter().map(|c| c.core.outstanding()).sum()
    }

    pub fn clients_connected(&self) -> usize {
        self.clients.iter().filter(|c| c.core.is_connected()).count()
    }

    pub fn clients_started(&self) -> bool {
        self.clients.iter().all(|c| c.started)
    }

    pub fn client_server(&self, c: ClientIdx) -> Option<&str> {
        self.clients[c].core.server()
    }

    fn schedule(&mut self, at: Duration, event: Event) {
        let idx = self.next_idx;
        self.next_idx += 1;
        self.queue.push(Reverse(Scheduled { at, idx, event }));
    }

    pub fn next_event_time(&self) -> Option<Duration> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    /// Processes one event. Returns false when the queue is empty or the
    /// next event lies beyond `until`.
    pub fn step(&mut self, until: Duration) -> bool {
        match self.queue.peek() {
            Some(Reverse(s)) if s.at <= until => {}
            _ => return false,
        }
        let Reverse(Scheduled { at, event, .. }) = self.queue.pop().expect("peeked");
        debug_assert!(at >= self.now, "virtual time went backwards");
        self.now = at;
        self.stats.events += 1;
        self.handle(event);
        true
    }

    pub fn run_until(&mut self, until: Duration) {
        while self.step(until) {}
        self.now = self.now.max(until);
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Timer(Endpoint::Server(i)) => {
                if self.servers[i].timer_at != Some(self.now) {
                    return;
                }
                self.servers[i].timer_at = None;
                let now = self.now;
                if let Some(b) = self.servers[i].broker.as_mut() {
                    b.tick(now);
                    self.drive_server(i);
                }
            }
            Event::Timer(Endpoint::Client(c)) => {
                if self.clients[c].timer_at != Some(self.now) {
                    return;
                }
                self.clients[c].timer_at = None;
                let now = self.now;
                self.clients[c].core.tick(now);
                self.drive_client(c);
            }
            Event::Link { from, to, src_inc, dst_inc, payload } => self.deliver(from, to, src_inc, dst_inc, payload),
            Event::Fault(f) => self.inject(f),
            Event::StartClients => self.start_clients(),
            Event::Publish { client, k } => self.publish(client, k),
        }
    }

    fn start_clients(&mut self) {
        let ready = self.servers.iter().all(|s| s.broker.as_ref().is_none_or(|b| b.node().accepting_clients()));
        if !ready {
            let at = self.now + Duration::from_millis(100);
            self.schedule(at, Event::StartClients);
            return;
        }
        let now = self.now;
        let start = self.workload.publish_start.max(now + Duration::from_millis(500));
        for c in 0..self.clients.len() {
            let slot = &mut self.clients[c];
            slot.started = true;
            slot.core.start(now);
            for t in slot.topics.clone() {
                let topic = self.topics[t].clone();
                self.clients[c].core.subscribe(topic);
            }
            if self.clients[c].role == ClientRole::Publisher {
                let n = self.workload.publishers.max(1) as u32;
                let offset = self.workload.publish_interval * (c as u32) / n;
                self.schedule(start + offset, Event::Publish { client: c, k: 0 });
            }
            self.drive_client(c);
        }
    }

    fn publish(&mut self, c: ClientIdx, k: u64) {
        if self.now >= self.workload.publish_stop {
            return;
        }
        let p = self.workload.publishers.max(1) as u64;
        let t = ((c as u64 + k * p) % self.workload.topics as u64) as usize;
        let mut payload = format!("p{c}:{k}:").into_bytes();
        payload.resize(self.workload.payload_bytes.max(payload.len()), b'.');
        let ack = self.workload.require_ack;
        let now = self.now;
        let msg_id = self.clients[c]
            .core
            .publish(now, self.topics[t].clone(), Bytes::from(payload), ack)
            .expect("payload within limits");
        self.trace.push(now, TraceEvent::Published { client: c, msg_id, topic: t, ack });
        self.drive_client(c);
        let next = now + self.workload.publish_interval;
        self.schedule(next, Event::Publish { client: c, k: k + 1 });
    }

    // ---- links ----

    fn server_inc(&self, ep: Endpoint) -> Option<u32> {
        match ep {
            Endpoint::Server(i) => Some(self.servers[i].incarnation),
            Endpoint::Client(_) => None,
        }
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, payload: Payload) {
        let src_inc = self.server_inc(from);
        self.send_with(from, to, src_inc, payload);
    }

    fn send_with(&mut self, from: Endpoint, to: Endpoint, src_inc: Option<u32>, payload: Payload) {
        let delay_us = self.rng.gen_range(self.cfg.link_min.as_micros() as u64..=self.cfg.link_max.as_micros() as u64);
        let mut at = self.now + Duration::from_micros(delay_us);
        let last = self.link_last.entry((from, to)).or_insert(Duration::ZERO);
        at = at.max(*last);
        *last = at;
        let dst_inc = self.server_inc(to);
        self.schedule(at, Event::Link { from, to, src_inc, dst_inc, payload });
    }

    fn server_alive(&self, i: usize, inc: Option<u32>) -> bool {
        let s = &self.servers[i];
        s.broker.is_some() && inc.is_none_or(|n| n == s.incarnation)
    }

    fn deliver(&mut self, from: Endpoint, to: Endpoint, src_inc: Option<u32>, dst_inc: Option<u32>, payload: Payload) {
        if let Endpoint::Server(s) = from {
            if src_inc.is_some() && !self.server_alive(s, src_inc) {
                self.stats.frames_dropped += 1;
                return;
            }
        }
        if let Endpoint::Server(d) = to {
            if !self.server_alive(d, dst_inc) {
                self.stats.frames_dropped += 1;
                if let (Payload::Open { conn }, Endpoint::Client(_)) = (&payload, from) {
                    // connection refused
                    let conn = *conn;
                    self.send_with(to, from, None, Payload::Opened { conn, ok: false });
                }
                return;
            }
        }
        let now = self.now;
        match payload {
            Payload::Peer(frame) => {
                let (Endpoint::Server(a), Endpoint::Server(b)) = (from, to) else { return };
                if self.cut.contains(&(a, b)) {
                    self.stats.frames_dropped += 1;
                    return;
                }
                self.stats.peer_frames += 1;
                let id = self.servers[a].id;
                if let Some(br) = self.servers[b].broker.as_mut() {
                    br.peer_frame(now, id, frame);
                }
                self.drive_server(b);
            }
            Payload::Open { conn } => {
                let Endpoint::Server(s) = to else { return };
                let Some(info) = self.conns.get(&conn).copied() else { return };
                if !info.open {
                    return;
                }
                let client = info.client;
                self.servers[s].buffers.insert(conn, DecodeBuffer::new());
                let id = self.servers[s].id;
                self.trace.push(now, TraceEvent::ConnAttached { server: id, conn, client });
                if let Some(br) = self.servers[s].broker.as_mut() {
                    br.client_connected(now, conn, format!("c{client}"));
                }
                self.send(to, from, Payload::Opened { conn, ok: true });
                self.drive_server(s);
            }
            Payload::Opened { conn, ok } => {
                let Endpoint::Client(c) = to else { return };
                if self.clients[c].conn != Some(conn) {
                    return;
                }
                if ok && self.conns.get(&conn).is_some_and(|i| i.open) {
                    self.clients[c].core.on_transport_up(now);
                } else {
                    self.client_lost(c, conn);
                    self.clients[c].core.on_transport_down(now);
                }
                self.drive_client(c);
            }
            Payload::ToServer { conn, bytes } => {
                let Endpoint::Server(s) = to else { return };
                if !self.conns.get(&conn).is_some_and(|i| i.open && i.server == s) {
                    return;
                }
                let Some(buf) = self.servers[s].buffers.get_mut(&conn) else { return };
                let frames = buf.decode_frames(&bytes).expect("clients send well-formed frames");
                for f in frames {
                    if let Some(br) = self.servers[s].broker.as_mut() {
                        br.client_frame(now, conn, f);
                    }
                }
                self.drive_server(s);
            }
            Payload::ToClient { conn, bytes } => {
                let Endpoint::Client(c) = to else { return };
                if self.clients[c].conn != Some(conn) {
                    return;
                }
                let frames = self.clients[c].buffer.decode_frames(&bytes).expect("servers send well-formed frames");
                for f in frames {
                    if self.clients[c].conn != Some(conn) {
                        break;
                    }
                    self.clients[c].core.on_frame(now, f);
                    self.drive_client(c);
                }
            }
            Payload::CloseFromClient { conn } => {
                let Endpoint::Server(s) = to else { return };
                if self.servers[s].buffers.remove(&conn).is_some() {
                    if let Some(br) = self.servers[s].broker.as_mut() {
                        br.client_closed(now, conn);
                    }
                    self.drive_server(s);
                }
            }
            Payload::CloseFromServer { conn } => {
                let Endpoint::Client(c) = to else { return };
                if self.clients[c].conn != Some(conn) {
                    return;
                }
                self.client_lost(c, conn);
                self.clients[c].core.on_transport_down(now);
                self.drive_client(c);
            }
        }
    }

    fn client_lost(&mut self, c: ClientIdx, conn: ConnectionId) {
        if let Some(i) = self.conns.get_mut(&conn) {
            i.open = false;
        }
        if self.clients[c].conn == Some(conn) {
            self.clients[c].conn = None;
            self.clients[c].buffer = DecodeBuffer::new();
        }
    }

    // ---- drivers ----

    fn drive_server(&mut self, i: usize) {
        let now = self.now;
        let Some(br) = self.servers[i].broker.as_mut() else { return };
        let outputs: Vec<BrokerOutput> = br.drain().collect();
        let deadline = br.next_deadline();
        let id = self.servers[i].id;
        for o in outputs {
            match o {
                BrokerOutput::ToPeer { peer, frame } => {
                    let to = usize::from(peer.0) - 1;
                    if let Some((n, kind)) = self.drop_next.get_mut(&(i, to)) {
                        if kind.is_none_or(|k| k == frame.kind()) {
                            *n -= 1;
                            if *n == 0 {
                                self.drop_next.remove(&(i, to));
                            }
                            self.stats.frames_dropped += 1;
                            continue;
                        }
                    }
                    if self.cut.contains(&(i, to)) {
                        self.stats.frames_dropped += 1;
                        continue;
                    }
                    self.send(Endpoint::Server(i), Endpoint::Server(to), Payload::Peer(frame));
                }
                BrokerOutput::ToClient { conn, bytes } => {
                    if let Some(info) = self.conns.get(&conn).copied() {
                        if info.open && info.server == i {
                            self.send(Endpoint::Server(i), Endpoint::Client(info.client), Payload::ToClient { conn, bytes });
                        }
                    }
                }
                BrokerOutput::CloseClient { conn, .. } => {
                    self.servers[i].buffers.remove(&conn);
                    if let Some(info) = self.conns.get(&conn).copied() {
                        if info.open && info.server == i {
                            self.trace.push(now, TraceEvent::ConnClosedByServer { server: id, conn });
                            self.send(Endpoint::Server(i), Endpoint::Client(info.client), Payload::CloseFromServer { conn });
                        }
                    }
                }
                BrokerOutput::LocalReply { .. } => {}
                BrokerOutput::Event(e) => {
                    self.record_node_event(i, e);
                }
            }
        }
        self.arm(Endpoint::Server(i), deadline);
        if self.servers.len() > 1 {
            self.check_single_owner(i);
        }
    }

    fn topic_index(&self, t: &TopicName) -> usize {
        t.as_str().strip_prefix("topic/").and_then(|n| n.parse().ok()).unwrap_or(usize::MAX)
    }

    fn record_node_event(&mut self, i: usize, e: NodeEvent) {
        let now = self.now;
        let server = self.servers[i].id;
        let ev = match e {
            NodeEvent::Won { group, epoch } => TraceEvent::Won { server, group, epoch },
            NodeEvent::Assigned { group, epoch, topic, key, .. } => {
                TraceEvent::Assigned { server, group, epoch, topic: self.topic_index(&topic), key }
            }
            NodeEvent::Acked { topic, key, .. } => {
                let copies = self
                    .servers
                    .iter()
                    .filter_map(|s| s.broker.as_ref())
                    .filter(|b| b.cache().contains(&topic, key))
                    .count();
                TraceEvent::AckEmitted { server, topic: self.topic_index(&topic), key, copies }
            }
            NodeEvent::GapDetected { group, .. } => TraceEvent::GapDetected { server, group },
            NodeEvent::RoundFinished { group, purpose, applied } => {
                TraceEvent::RoundFinished { server, group, purpose, applied }
            }
            NodeEvent::Fenced => TraceEvent::Fenced { server },
            NodeEvent::Rebuilding => TraceEvent::Rebuilding { server },
            NodeEvent::Ready => TraceEvent::Ready { server },
            other => {
                trace!(%server, ?other, "node event");
                return;
            }
        };
        self.trace.push(now, ev);
    }

    /// No group owned by server `i` may be owned by another live server.
    fn check_single_owner(&mut self, i: usize) {
        let now = self.now;
        let Some(b) = self.servers[i].broker.as_ref() else { return };
        let mine = b.node().owned_groups(now);
        if mine.is_empty() {
            return;
        }
        for group in mine {
            let owners: Vec<ServerId> = self
                .servers
                .iter()
                .filter(|s| s.broker.as_ref().is_some_and(|b| b.node().owns(group, now)))
                .map(|s| s.id)
                .collect();
            if owners.len() > 1 {
                self.trace.push(now, TraceEvent::OwnerConflict { group, owners });
            }
        }
    }

    fn drive_client(&mut self, c: ClientIdx) {
        let now = self.now;
        let actions: Vec<ClientAction> = self.clients[c].core.drain_actions().collect();
        for a in actions {
            match a {
                ClientAction::Connect { address } => {
                    let s: usize = address.trim_start_matches('s').parse::<usize>().expect("server address") - 1;
                    let conn = ConnectionId(self.next_conn);
                    self.next_conn += 1;
                    let incarnation = self.servers[s].incarnation;
                    self.conns.insert(conn, ConnInfo { client: c, server: s, incarnation, open: true });
                    self.clients[c].conn = Some(conn);
                    self.clients[c].buffer = DecodeBuffer::new();
                    self.send(Endpoint::Client(c), Endpoint::Server(s), Payload::Open { conn });
                }
                ClientAction::Send(frame) => {
                    let Some(conn) = self.clients[c].conn else { continue };
                    let Some(info) = self.conns.get(&conn).copied() else { continue };
                    let bytes = encode_frame(&frame).expect("client frames encode");
                    let to = Endpoint::Server(info.server);
                    let src = Endpoint::Client(c);
                    let delay_target_inc = Some(info.incarnation);
                    let delay_us = self
                        .rng
                        .gen_range(self.cfg.link_min.as_micros() as u64..=self.cfg.link_max.as_micros() as u64);
                    let last = self.link_last.entry((src, to)).or_insert(Duration::ZERO);
                    let at = (now + Duration::from_micros(delay_us)).max(*last);
                    *last = at;
                    self.schedule(
                        at,
                        Event::Link { from: src, to, src_inc: None, dst_inc: delay_target_inc, payload: Payload::ToServer { conn, bytes } },
                    );
                }
                ClientAction::Disconnect => {
                    if let Some(conn) = self.clients[c].conn {
                        if let Some(info) = self.conns.get(&conn).copied() {
                            if info.open {
                                let server = self.servers[info.server].id;
                                self.trace.push(now, TraceEvent::ConnClosedByClient { server, conn });
                            }
                            self.client_lost(c, conn);
                            self.send(Endpoint::Client(c), Endpoint::Server(info.server), Payload::CloseFromClient { conn });
                        }
                    }
                }
                ClientAction::Message(m) => {
                    let topic = self.topic_index(&m.topic);
                    let payload = fnv1a64(&m.payload);
                    self.trace.push(now, TraceEvent::Delivered { client: c, topic, key: m.key, msg_id: m.msg_id, payload });
                }
                ClientAction::Published { msg_id, outcome } => {
                    let ev = match outcome {
                        PublishOutcome::Acked(key) => TraceEvent::PubAcked { client: c, msg_id, key },
                        PublishOutcome::Failed(_) => TraceEvent::PubFailed { client: c, msg_id },
                    };
                    self.trace.push(now, ev);
                }
                ClientAction::Truncated { topic } => {
                    let topic = self.topic_index(&topic);
                    self.trace.push(now, TraceEvent::Truncated { client: c, topic });
                }
                ClientAction::Connected { address } => {
                    let server = ServerId(address.trim_start_matches('s').parse().expect("server address"));
                    self.trace.push(now, TraceEvent::ClientConnected { client: c, server });
                }
                ClientAction::Disconnected { address } => {
                    let server = ServerId(address.trim_start_matches('s').parse().expect("server address"));
                    self.trace.push(now, TraceEvent::ClientDisconnected { client: c, server });
                }
            }
        }
        let deadline = self.clients[c].core.next_deadline();
        if self.clients[c].started {
            self.arm(Endpoint::Client(c), deadline);
        }
    }

    fn arm(&mut self, ep: Endpoint, deadline: Duration) {
        let at = deadline.max(self.now + Duration::from_millis(1));
        let slot = match ep {
            Endpoint::Server(i) => &mut self.servers[i].timer_at,
            Endpoint::Client(c) => &mut self.clients[c].timer_at,
        };
        if slot.is_some_and(|t| t <= at && t > self.now) {
            return;
        }
        *slot = Some(at);
        self.schedule(at, Event::Timer(ep));
    }

    // ---- faults ----

    fn inject(&mut self, f: Fault) {
        let now = self.now;
        self.trace.push(now, TraceEvent::Fault(f.clone()));
        match f {
            Fault::Crash(s) => {
                if self.servers[s].broker.take().is_none() {
                    return;
                }
                self.servers[s].incarnation += 1;
                self.servers[s].timer_at = None;
                self.servers[s].buffers.clear();
                let open: Vec<(ConnectionId, ConnInfo)> =
                    self.conns.iter().filter(|(_, i)| i.open && i.server == s).map(|(c, i)| (*c, *i)).collect();
                for (conn, info) in open {
                    // the peer's kernel resets the connection
                    self.send_with(Endpoint::Server(s), Endpoint::Client(info.client), None, Payload::CloseFromServer { conn });
                }
            }
            Fault::Restart(s) => {
                if self.servers[s].broker.is_some() {
                    return;
                }
                let b = Broker::restarted(self.broker_config(s), now);
                self.servers[s].broker = Some(b);
                self.drive_server(s);
            }
            Fault::Partition(sets) => {
                self.cut.clear();
                for (x, a) in sets.iter().enumerate() {
                    for (y, b) in sets.iter().enumerate() {
                        if x != y {
                            for &i in a {
                                for &j in b {
                                    self.cut.insert((i, j));
                                }
                            }
                        }
                    }
                }
            }
            Fault::Heal => self.cut.clear(),
            Fault::DropNext { from, to, count, kind } => {
                if count > 0 {
                    self.drop_next.insert((from, to), (count, kind));
                }
            }
        }
    }
}
