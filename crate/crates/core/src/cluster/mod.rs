//! Replication across cluster members.
//!
//! Topics are hashed into groups and each group has at most one
//! coordinator, elected through the coordination store by creating the
//! ephemeral entry `coord/<group>` and advancing the counter
//! `epoch/<group>`. The coordinator stamps each publication with
//! `(epoch, seq)`, appends it to its cache and broadcasts it. A publication
//! is acknowledged only once two servers hold it.
//!
//! Receivers chain each broadcast onto the previous key they hold for the
//! topic; a broken chain starts a reconciliation round that asks every live
//! peer for what is missing. A new coordinator reconciles before it
//! sequences anything. A server that loses both its peers and its
//! coordination quorum fences itself: it closes its clients, drops its
//! roles and, once healed, rebuilds its cache from the others.
//!
//! [`ServerNode`] is sans-IO. Feed it publications, peer frames and ticks,
//! then drain its outputs.

mod gossip;
mod reconcile;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracing::{debug, info, warn};

pub use gossip::GossipMap;
pub use reconcile::{chunk_entries, merge, Purpose, CHUNK_BYTES};
use reconcile::Round;

use crate::coordkv::{KvConfig, KvEvent, KvReplica, KvResult, SessionId, WatchKind};
use crate::engine::{AppendOutcome, Origin, PublishRequest, TopicCache};
use crate::ids::{GroupId, MsgId, OrderKey, ServerId, TopicName};
use crate::message::Message;
use crate::wire::{
    ChainedMessage, CloseReason, Frame, Gossip, NackReason, Publish, ReconcileRequest, ReconcileResponse,
};

pub fn coord_key(group: GroupId) -> String {
    format!("coord/{}", group.index())
}

pub fn epoch_key(group: GroupId) -> String {
    format!("epoch/{}", group.index())
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub id: ServerId,
    /// Every cluster member, this one included.
    pub members: Vec<ServerId>,
    pub num_groups: u32,
    pub pub_timeout: Duration,
    pub replicate_retry: Duration,
    pub ping_interval: Duration,
    /// Silence after which a peer counts as down.
    pub peer_timeout: Duration,
    pub round_timeout: Duration,
    /// Limit on an election's coordination-store steps.
    pub election_timeout: Duration,
    pub kv: KvConfig,
    pub seed: u64,
}

impl NodeConfig {
    pub fn new(id: ServerId, members: Vec<ServerId>, num_groups: u32) -> Self {
        Self {
            id,
            members,
            num_groups,
            pub_timeout: Duration::from_secs(2),
            replicate_retry: Duration::from_millis(250),
            ping_interval: Duration::from_millis(250),
            peer_timeout: Duration::from_secs(1),
            round_timeout: Duration::from_secs(1),
            election_timeout: Duration::from_secs(2),
            kv: KvConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    Won { group: GroupId, epoch: u64 },
    Lost { group: GroupId, owner: Option<ServerId> },
    OwnershipLost { group: GroupId },
    Assigned { group: GroupId, epoch: u64, topic: TopicName, key: OrderKey, msg_id: MsgId },
    /// A PUBACK is being emitted for this message.
    Acked { topic: TopicName, key: OrderKey, msg_id: MsgId },
    GapDetected { group: GroupId, topic: TopicName, head: OrderKey, prev: OrderKey },
    RoundStarted { group: GroupId, purpose: Purpose },
    RoundFinished { group: GroupId, purpose: Purpose, applied: usize },
    PeerUp(ServerId),
    PeerDown(ServerId),
    Fenced,
    Rebuilding,
    Ready,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOutput {
    ToPeer { peer: ServerId, frame: Frame },
    /// A PUBACK or PUBNACK for the client that published.
    Reply { origin: Origin, frame: Frame },
    /// Hand a newly cached message to local subscribers.
    Deliver(Arc<Message>),
    CloseClients(CloseReason),
    Event(NodeEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Waiting for the coordination store. `rejoin` servers rebuild first.
    Starting { rejoin: bool },
    Rebuilding,
    Running,
    Fenced,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct NodeStatus {
    pub id: u16,
    pub phase: String,
    pub accepting_clients: bool,
    pub owned_groups: Vec<u32>,
    pub live_peers: Vec<u16>,
    pub kv_leader: Option<u16>,
    pub kv_term: u64,
    pub write_available: bool,
    pub session: Option<u64>,
    pub cached_messages: usize,
    pub rounds_active: usize,
}

/// Where to send the outcome of a publication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Contact {
    /// This server is the contact; the pending entry is keyed by msg_id.
    Local,
    Peer(ServerId),
}

#[derive(Debug, Clone)]
struct Queued {
    publish: Publish,
    contact: Contact,
}

#[derive(Debug)]
struct PendingPub {
    origin: Origin,
    topic: TopicName,
    deadline: Duration,
    forwarded_to: Option<ServerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Creating,
    Incrementing { expected: u64 },
    Reconciling { epoch: u64 },
}

#[derive(Debug)]
struct Election {
    stage: Stage,
    kv_request: Option<u64>,
    deadline: Duration,
    queue: Vec<Queued>,
}

#[derive(Debug)]
struct Inflight {
    message: Arc<Message>,
    prev: OrderKey,
    unacked: BTreeSet<ServerId>,
    /// The local publisher to acknowledge on the first REPL_ACK.
    ack_to: Option<MsgId>,
    sent_at: Duration,
}

#[derive(Debug, Clone, Copy)]
struct Owned {
    epoch: u64,
}

#[derive(Debug, Clone, Copy)]
struct PeerState {
    last_heard: Duration,
    up: bool,
}

pub struct ServerNode {
    cfg: NodeConfig,
    peers: Vec<ServerId>,
    cache: Arc<TopicCache>,
    kv: KvReplica,
    rng: ChaCha8Rng,
    phase: Phase,

    session: Option<SessionId>,
    session_request: Option<u64>,
    /// Sessions of ours that must be expired once a new one is open.
    stale_sessions: BTreeSet<SessionId>,

    gossip: GossipMap,
    owned: BTreeMap<GroupId, Owned>,
    elections: BTreeMap<GroupId, Election>,
    kv_requests: BTreeMap<u64, GroupId>,
    watched: BTreeSet<GroupId>,

    pending: BTreeMap<MsgId, PendingPub>,
    inflight: BTreeMap<(TopicName, OrderKey), Inflight>,

    rounds: BTreeMap<GroupId, Round>,
    held: BTreeMap<GroupId, Vec<(ServerId, ChainedMessage)>>,
    rebuild_left: BTreeSet<GroupId>,
    next_request: u64,

    peer_state: BTreeMap<ServerId, PeerState>,
    next_ping: Duration,
    next_retry: Duration,

    out: VecDeque<NodeOutput>,
}

impl ServerNode {
    /// A member joining a cluster whose caches are empty.
    pub fn new(cfg: NodeConfig, cache: Arc<TopicCache>, now: Duration) -> Self {
        Self::build(cfg, cache, now, false)
    }

    /// A member restarting with an empty cache into a running cluster.
    pub fn restarted(cfg: NodeConfig, cache: Arc<TopicCache>, now: Duration) -> Self {
        Self::build(cfg, cache, now, true)
    }

    fn build(cfg: NodeConfig, cache: Arc<TopicCache>, now: Duration, rejoin: bool) -> Self {
        assert_eq!(cache.num_groups(), cfg.num_groups, "cache and cluster disagree on group count");
        let peers: Vec<ServerId> =
            cfg.members.iter().copied().filter(|m| *m != cfg.id).collect::<BTreeSet<_>>().into_iter().collect();
        let kv = if rejoin {
            KvReplica::rejoin(cfg.id, &cfg.members, cfg.kv.clone(), cfg.seed, now)
        } else {
            KvReplica::new(cfg.id, &cfg.members, cfg.kv.clone(), cfg.seed, now)
        };
        let peer_state = peers.iter().map(|p| (*p, PeerState { last_heard: now, up: true })).collect();
        let mut node = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ u64::from(cfg.id.0)),
            peers,
            cache,
            kv,
            phase: Phase::Starting { rejoin },
            session: None,
            session_request: None,
            stale_sessions: BTreeSet::new(),
            gossip: GossipMap::default(),
            owned: BTreeMap::new(),
            elections: BTreeMap::new(),
            kv_requests: BTreeMap::new(),
            watched: BTreeSet::new(),
            pending: BTreeMap::new(),
            inflight: BTreeMap::new(),
            rounds: BTreeMap::new(),
            held: BTreeMap::new(),
            rebuild_left: BTreeSet::new(),
            next_request: 1,
            peer_state,
            next_ping: now,
            next_retry: now,
            out: VecDeque::new(),
            cfg,
        };
        node.tick(now);
        node
    }

    pub fn id(&self) -> ServerId {
        self.cfg.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn cache(&self) -> &Arc<TopicCache> {
        &self.cache
    }

    pub fn kv(&self) -> &KvReplica {
        &self.kv
    }

    pub fn gossip(&self) -> &GossipMap {
        &self.gossip
    }

    pub fn session(&self) -> Option<SessionId> {
        self.session
    }

    fn single(&self) -> bool {
        self.peers.is_empty()
    }

    pub fn accepting_clients(&self) -> bool {
        self.phase == Phase::Running && self.session.is_some()
    }

    pub fn peer_up(&self, peer: ServerId) -> bool {
        self.peer_state.get(&peer).is_some_and(|p| p.up)
    }

    pub fn live_peers(&self) -> Vec<ServerId> {
        self.peers.iter().copied().filter(|p| self.peer_up(*p)).collect()
    }

    /// Whether this server may sequence `group` right now.
    pub fn owns(&self, group: GroupId, now: Duration) -> bool {
        self.owned.contains_key(&group) && self.ownership_valid(group, now)
    }

    fn ownership_valid(&self, group: GroupId, now: Duration) -> bool {
        self.phase == Phase::Running
            && self.session.is_some()
            && self.kv.local_write_available(now)
            && self.kv.state().get(&coord_key(group)).and_then(|e| e.ephemeral) == self.session
    }

    pub fn owned_groups(&self, now: Duration) -> Vec<GroupId> {
        self.owned.keys().copied().filter(|g| self.owns(*g, now)).collect()
    }

    pub fn status(&self, now: Duration) -> NodeStatus {
        NodeStatus {
            id: self.cfg.id.0,
            phase: format!("{:?}", self.phase),
            accepting_clients: self.accepting_clients(),
            owned_groups: self.owned_groups(now).iter().map(|g| g.index()).collect(),
            live_peers: self.live_peers().iter().map(|p| p.0).collect(),
            kv_leader: self.kv.leader().map(|l| l.0),
            kv_term: self.kv.term(),
            write_available: self.kv.local_write_available(now),
            session: self.session.map(|s| s.0),
            cached_messages: self.cache.total_messages(),
            rounds_active: self.rounds.len(),
        }
    }

    pub fn drain(&mut self) -> impl Iterator<Item = NodeOutput> + '_ {
        self.out.drain(..)
    }

    pub fn has_output(&self) -> bool {
        !self.out.is_empty()
    }

    fn emit(&mut self, e: NodeEvent) {
        self.out.push_back(NodeOutput::Event(e));
    }

    fn send_to_peer(&mut self, peer: ServerId, frame: Frame) {
        self.out.push_back(NodeOutput::ToPeer { peer, frame });
    }

    fn request_id(&mut self) -> u64 {
        let r = self.next_request;
        self.next_request += 1;
        r
    }

    pub fn next_deadline(&self) -> Duration {
        let mut d = self.kv.next_deadline().min(self.next_ping).min(self.next_retry);
        for p in self.pending.values() {
            d = d.min(p.deadline);
        }
        for r in self.rounds.values() {
            d = d.min(r.deadline);
        }
        for e in self.elections.values() {
            d = d.min(e.deadline);
        }
        d
    }

    // ---- inputs ----

    /// A publication from a local client or the admin API.
    pub fn handle_publish(&mut self, now: Duration, req: PublishRequest) {
        let PublishRequest { origin, publish } = req;
        if !self.accepting_clients() {
            self.reply_nack(origin, publish.msg_id, NackReason::Unavailable, None);
            return;
        }
        if publish.ack_requested {
            self.pending.insert(
                publish.msg_id,
                PendingPub { origin, topic: publish.topic.clone(), deadline: now + self.cfg.pub_timeout, forwarded_to: None },
            );
        }
        self.route(now, publish, Contact::Local);
        self.pump_kv(now);
    }

    fn route(&mut self, now: Duration, publish: Publish, contact: Contact) {
        let group = self.cache.group_of(&publish.topic);
        if self.owns(group, now) {
            self.assign(now, group, publish, contact);
            return;
        }
        if let Some(e) = self.elections.get_mut(&group) {
            e.queue.push(Queued { publish, contact });
            return;
        }
        if contact != Contact::Local || self.single() {
            self.run_for_coordinator(now, group, Queued { publish, contact });
            return;
        }
        let target = match self.gossip.get(group) {
            Some(owner) if owner != self.cfg.id && self.peer_up(owner) => Some(owner),
            _ => self.live_peers().into_iter().choose(&mut self.rng),
        };
        match target {
            Some(peer) => {
                if let Some(p) = self.pending.get_mut(&publish.msg_id) {
                    p.forwarded_to = Some(peer);
                }
                self.send_to_peer(peer, Frame::Publish(publish));
            }
            None => self.run_for_coordinator(now, group, Queued { publish, contact }),
        }
    }

    pub fn handle_peer_frame(&mut self, now: Duration, from: ServerId, frame: Frame) {
        if !self.peers.contains(&from) {
            warn!(node = %self.cfg.id, %from, "frame from unknown peer");
            return;
        }
        self.heard_from(now, from);
        match frame {
            Frame::Ping => self.send_to_peer(from, Frame::Pong),
            Frame::Pong => {}
            Frame::Publish(publish) => {
                if self.phase != Phase::Running || self.session.is_none() {
                    self.send_to_peer(
                        from,
                        Frame::PubNack { msg_id: publish.msg_id, reason: NackReason::Unavailable, owner: None },
                    );
                } else {
                    self.route(now, publish, Contact::Peer(from));
                }
            }
            Frame::PubNack { msg_id, reason, owner } => {
                if let Some(p) = self.pending.get(&msg_id) {
                    let group = self.cache.group_of(&p.topic);
                    match owner {
                        Some(o) if o != self.cfg.id => self.gossip.set(group, o, now),
                        _ => self.gossip.invalidate_if(group, from),
                    }
                }
                self.nack_local(msg_id, reason, owner);
            }
            Frame::Replicate(cm) => self.on_replicate(now, from, cm),
            Frame::ReplAck { topic, key } => self.on_repl_ack(from, topic, key),
            Frame::CoordGossip(Gossip::Kv(m)) => self.kv.handle_message(now, from, m),
            Frame::CoordGossip(Gossip::Announce { group, owner, epoch }) => {
                debug!(node = %self.cfg.id, group = group.index(), %owner, epoch, "announce");
                if owner != self.cfg.id {
                    self.gossip.set(group, owner, now);
                    self.watch_group(group);
                    if self.phase == Phase::Running {
                        self.start_round(now, group, Purpose::Follow);
                    }
                }
            }
            Frame::ReconcileReq(req) => self.on_reconcile_req(from, req),
            Frame::ReconcileRsp(rsp) => self.on_reconcile_rsp(now, from, rsp),
            other => {
                warn!(node = %self.cfg.id, %from, kind = ?other.kind(), "unexpected frame on peer link");
            }
        }
        self.pump_kv(now);
    }

    pub fn tick(&mut self, now: Duration) {
        self.kv.tick(now);
        if now >= self.next_ping {
            self.next_ping = now + self.cfg.ping_interval;
            for p in self.peers.clone() {
                self.send_to_peer(p, Frame::Ping);
            }
        }
        self.check_peers(now);
        self.advance_phase(now);
        self.check_ownership(now);
        self.expire_pending(now);
        self.expire_elections(now);
        self.expire_rounds(now);
        if now >= self.next_retry {
            self.next_retry = now + self.cfg.replicate_retry;
            self.retransmit(now);
        }
        self.pump_kv(now);
    }

    // ---- peers and phases ----

    fn heard_from(&mut self, now: Duration, peer: ServerId) {
        let was_up = {
            let st = self.peer_state.entry(peer).or_insert(PeerState { last_heard: now, up: false });
            st.last_heard = now;
            std::mem::replace(&mut st.up, true)
        };
        if !was_up {
            info!(node = %self.cfg.id, %peer, "peer up");
            self.emit(NodeEvent::PeerUp(peer));
            if self.phase == Phase::Running {
                for g in self.gossip.groups_of(peer) {
                    self.start_round(now, g, Purpose::Follow);
                }
            }
        }
    }

    fn check_peers(&mut self, now: Duration) {
        let timeout = self.cfg.peer_timeout;
        let went_down: Vec<ServerId> = self
            .peer_state
            .iter_mut()
            .filter(|(_, s)| s.up && now.saturating_sub(s.last_heard) >= timeout)
            .map(|(p, s)| {
                s.up = false;
                *p
            })
            .collect();
        for peer in went_down {
            info!(node = %self.cfg.id, %peer, "peer down");
            self.emit(NodeEvent::PeerDown(peer));
            for inf in self.inflight.values_mut() {
                inf.unacked.remove(&peer);
            }
            self.inflight.retain(|_, i| !i.unacked.is_empty() || i.ack_to.is_some());
            let forwarded: Vec<MsgId> =
                self.pending.iter().filter(|(_, p)| p.forwarded_to == Some(peer)).map(|(m, _)| *m).collect();
            for m in forwarded {
                self.nack_local(m, NackReason::Unavailable, None);
            }
            let groups: Vec<GroupId> = self.rounds.keys().copied().collect();
            for g in groups {
                if let Some(r) = self.rounds.get_mut(&g) {
                    r.waiting.remove(&peer);
                    if r.waiting.is_empty() {
                        self.finish_round(now, g);
                    }
                }
            }
        }
    }

    fn peers_down(&self) -> usize {
        self.peers.len() - self.live_peers().len()
    }

    fn advance_phase(&mut self, now: Duration) {
        let available = self.kv.local_write_available(now);
        match self.phase {
            Phase::Starting { rejoin } => {
                if available {
                    self.ensure_session(now);
                    if rejoin {
                        self.begin_rebuild(now);
                    } else if self.session.is_some() {
                        self.set_running();
                    }
                }
            }
            Phase::Rebuilding => {
                if self.rebuild_left.is_empty() && self.session.is_some() {
                    self.set_running();
                }
            }
            Phase::Running => {
                let threshold = self.peers.len().min(2);
                if threshold > 0 && self.peers_down() >= threshold && !available {
                    self.fence(now);
                }
            }
            Phase::Fenced => {
                let threshold = self.peers.len().min(2);
                if available && self.peers_down() < threshold {
                    info!(node = %self.cfg.id, "partition healed; rebuilding");
                    if let Some(s) = self.session.take() {
                        self.stale_sessions.insert(s);
                    }
                    self.session_request = None;
                    self.ensure_session(now);
                    self.begin_rebuild(now);
                }
            }
        }
    }

    fn set_running(&mut self) {
        info!(node = %self.cfg.id, "ready");
        self.phase = Phase::Running;
        self.emit(NodeEvent::Ready);
    }

    fn ensure_session(&mut self, now: Duration) {
        if self.session.is_none() && self.session_request.is_none() {
            self.session_request = Some(self.kv.open_session(now));
        }
    }

    fn begin_rebuild(&mut self, now: Duration) {
        self.phase = Phase::Rebuilding;
        self.emit(NodeEvent::Rebuilding);
        self.cache.clear();
        self.held.clear();
        self.rounds.clear();
        self.rebuild_left = (0..self.cfg.num_groups).map(GroupId::from_raw).collect();
        for g in self.rebuild_left.clone() {
            self.start_round(now, g, Purpose::Rebuild);
        }
    }

    fn fence(&mut self, now: Duration) {
        warn!(node = %self.cfg.id, "isolated from peers and coordination quorum; fencing");
        self.phase = Phase::Fenced;
        self.out.push_back(NodeOutput::CloseClients(CloseReason::Fenced));
        self.emit(NodeEvent::Fenced);
        for g in std::mem::take(&mut self.owned).into_keys() {
            self.emit(NodeEvent::OwnershipLost { group: g });
        }
        for (g, e) in std::mem::take(&mut self.elections) {
            if let Some(r) = e.kv_request {
                self.kv.cancel(r);
                self.kv_requests.remove(&r);
            }
            self.nack_queue(g, e.queue, NackReason::Unavailable, None);
        }
        let pending: Vec<MsgId> = self.pending.keys().copied().collect();
        for m in pending {
            self.nack_local(m, NackReason::Unavailable, None);
        }
        self.inflight.clear();
        self.rounds.clear();
        self.held.clear();
        let _ = now;
    }

    fn check_ownership(&mut self, now: Duration) {
        let lost: Vec<GroupId> = self.owned.keys().copied().filter(|g| !self.ownership_valid(*g, now)).collect();
        for g in lost {
            // a lapsed lease alone is not a loss; the entry is still ours
            let entry_ours =
                self.session.is_some() && self.kv.state().get(&coord_key(g)).and_then(|e| e.ephemeral) == self.session;
            if !entry_ours {
                info!(node = %self.cfg.id, group = g.index(), "ownership lost");
                self.owned.remove(&g);
                self.emit(NodeEvent::OwnershipLost { group: g });
            }
        }
    }

    // ---- coordination store ----

    fn watch_group(&mut self, group: GroupId) {
        if self.watched.insert(group) {
            self.kv.watch(&coord_key(group));
        }
    }

    fn pump_kv(&mut self, now: Duration) {
        for (peer, m) in self.kv.take_outbox() {
            self.send_to_peer(peer, Frame::CoordGossip(Gossip::Kv(m)));
        }
        while let Some(ev) = self.kv.poll_event() {
            match ev {
                KvEvent::Completed { request, result } => self.on_kv_completed(now, request, result),
                KvEvent::WatchFired { key, kind } => self.on_watch(now, &key, kind),
            }
            for (peer, m) in self.kv.take_outbox() {
                self.send_to_peer(peer, Frame::CoordGossip(Gossip::Kv(m)));
            }
        }
    }

    fn on_watch(&mut self, now: Duration, key: &str, kind: WatchKind) {
        let Some(group) = key.strip_prefix("coord/").and_then(|g| g.parse::<u32>().ok()).map(GroupId::from_raw) else {
            return;
        };
        self.watched.remove(&group);
        match kind {
            WatchKind::Deleted => {
                debug!(node = %self.cfg.id, group = group.index(), "coordinator entry deleted");
                self.gossip.invalidate(group);
            }
            WatchKind::Created | WatchKind::Changed => {
                if let Some(owner) = self.entry_owner(group) {
                    if owner != self.cfg.id {
                        self.gossip.set(group, owner, now);
                    }
                }
                self.watch_group(group);
            }
        }
    }

    fn entry_owner(&self, group: GroupId) -> Option<ServerId> {
        let st = self.kv.state();
        st.get(&coord_key(group)).and_then(|e| e.ephemeral).and_then(|s| st.session_owner(s))
    }

    fn on_kv_completed(&mut self, now: Duration, request: u64, result: KvResult) {
        if self.session_request == Some(request) {
            self.session_request = None;
            if let KvResult::SessionOpened(s) = result {
                info!(node = %self.cfg.id, session = %s, "session opened");
                self.session = Some(s);
                let mine: Vec<SessionId> =
                    self.kv.state().sessions().filter(|(o, owner)| *owner == self.cfg.id && *o != s).map(|(o, _)| o).collect();
                self.stale_sessions.extend(mine);
                for old in std::mem::take(&mut self.stale_sessions) {
                    self.kv.expire_session(now, old);
                }
            }
            return;
        }
        let Some(group) = self.kv_requests.remove(&request) else { return };
        let Some(e) = self.elections.get_mut(&group) else { return };
        e.kv_request = None;
        match (e.stage, result) {
            (Stage::Creating, KvResult::Created) => self.increment_epoch(now, group),
            (Stage::Creating, KvResult::AlreadyExists) => {
                if self.entry_owner(group) == Some(self.cfg.id)
                    && self.kv.state().get(&coord_key(group)).and_then(|e| e.ephemeral) == self.session
                {
                    self.increment_epoch(now, group);
                } else {
                    let owner = self.entry_owner(group);
                    self.lose_election(now, group, owner);
                }
            }
            (Stage::Creating, KvResult::SessionExpired) => {
                warn!(node = %self.cfg.id, "session expired under us");
                self.session = None;
                self.ensure_session(now);
                self.abandon_election(group, NackReason::Unavailable);
            }
            (Stage::Incrementing { .. }, KvResult::Ok) => {
                let epoch = match e.stage {
                    Stage::Incrementing { expected } => expected + 1,
                    _ => unreachable!(),
                };
                self.begin_takeover(now, group, epoch);
            }
            (Stage::Incrementing { .. }, KvResult::Conflict(current)) => self.cas_epoch(now, group, current),
            (stage, other) => {
                warn!(node = %self.cfg.id, group = group.index(), ?stage, ?other, "unexpected election result");
                self.abandon_election(group, NackReason::Unavailable);
            }
        }
    }

    fn run_for_coordinator(&mut self, now: Duration, group: GroupId, first: Queued) {
        let Some(session) = self.session else {
            self.nack_queue(group, vec![first], NackReason::Unavailable, None);
            return;
        };
        if !self.kv.local_write_available(now) {
            self.nack_queue(group, vec![first], NackReason::Unavailable, None);
            return;
        }
        let key = coord_key(group);
        let holder = self.kv.state().get(&key).and_then(|e| e.ephemeral);
        if let Some(h) = holder.filter(|h| *h != session) {
            let owner = self.kv.state().session_owner(h);
            if owner.is_some_and(|o| o == self.cfg.id || self.peer_up(o)) {
                self.elections.insert(
                    group,
                    Election { stage: Stage::Creating, kv_request: None, deadline: now, queue: vec![first] },
                );
                self.lose_election(now, group, owner);
                return;
            }
        }
        debug!(node = %self.cfg.id, group = group.index(), "running for coordinator");
        let mut e = Election {
            stage: Stage::Creating,
            kv_request: None,
            deadline: now + self.cfg.election_timeout,
            queue: vec![first],
        };
        if holder == Some(session) {
            self.elections.insert(group, e);
            self.increment_epoch(now, group);
            return;
        }
        let r = self.kv.create_ephemeral(now, &key, Bytes::copy_from_slice(&self.cfg.id.0.to_be_bytes()), session);
        e.kv_request = Some(r);
        self.kv_requests.insert(r, group);
        self.elections.insert(group, e);
    }

    fn increment_epoch(&mut self, now: Duration, group: GroupId) {
        let current = self.kv.counter(&epoch_key(group));
        self.cas_epoch(now, group, current);
    }

    fn cas_epoch(&mut self, now: Duration, group: GroupId, expected: u64) {
        let r = self.kv.cas_counter(now, &epoch_key(group), expected, expected + 1).expect("expected + 1 > expected");
        self.kv_requests.insert(r, group);
        if let Some(e) = self.elections.get_mut(&group) {
            e.stage = Stage::Incrementing { expected };
            e.kv_request = Some(r);
        }
    }

    fn begin_takeover(&mut self, now: Duration, group: GroupId, epoch: u64) {
        if let Some(e) = self.elections.get_mut(&group) {
            e.stage = Stage::Reconciling { epoch };
            e.deadline = e.deadline.max(now + self.cfg.round_timeout * 2);
        }
        self.start_round(now, group, Purpose::Takeover);
    }

    fn win(&mut self, now: Duration, group: GroupId, epoch: u64) {
        let Some(e) = self.elections.remove(&group) else { return };
        info!(node = %self.cfg.id, group = group.index(), epoch, "won coordination");
        self.owned.insert(group, Owned { epoch });
        self.gossip.set(group, self.cfg.id, now);
        self.emit(NodeEvent::Won { group, epoch });
        for p in self.peers.clone() {
            self.send_to_peer(p, Frame::CoordGossip(Gossip::Announce { group, owner: self.cfg.id, epoch }));
        }
        for q in e.queue {
            if self.owns(group, now) {
                self.assign(now, group, q.publish, q.contact);
            } else {
                self.nack_queue(group, vec![q], NackReason::OwnershipLost, None);
            }
        }
    }

    fn lose_election(&mut self, now: Duration, group: GroupId, owner: Option<ServerId>) {
        let Some(e) = self.elections.remove(&group) else { return };
        debug!(node = %self.cfg.id, group = group.index(), ?owner, "lost coordination");
        let hint = owner.filter(|o| *o != self.cfg.id && self.peer_up(*o));
        match hint {
            Some(o) => self.gossip.set(group, o, now),
            None => self.gossip.invalidate(group),
        }
        self.watch_group(group);
        self.emit(NodeEvent::Lost { group, owner });
        self.nack_queue(group, e.queue, NackReason::NotCoordinator, hint);
        if self.phase == Phase::Running {
            self.start_round(now, group, Purpose::Follow);
        }
    }

    fn abandon_election(&mut self, group: GroupId, reason: NackReason) {
        if let Some(e) = self.elections.remove(&group) {
            if let Some(r) = e.kv_request {
                self.kv.cancel(r);
                self.kv_requests.remove(&r);
            }
            self.nack_queue(group, e.queue, reason, None);
        }
    }

    fn expire_elections(&mut self, now: Duration) {
        let late: Vec<GroupId> = self.elections.iter().filter(|(_, e)| now >= e.deadline).map(|(g, _)| *g).collect();
        for g in late {
            debug!(node = %self.cfg.id, group = g.index(), "election timed out");
            self.rounds.remove(&g);
            self.flush_held(now, g);
            self.abandon_election(g, NackReason::Timeout);
        }
    }

    // ---- sequencing and replication ----

    fn assign(&mut self, now: Duration, group: GroupId, publish: Publish, contact: Contact) {
        let epoch = self.owned[&group].epoch;
        let head = self.cache.head(&publish.topic);
        if head.epoch > epoch {
            warn!(node = %self.cfg.id, group = group.index(), "cache holds a newer epoch; giving up ownership");
            self.owned.remove(&group);
            self.emit(NodeEvent::OwnershipLost { group });
            self.nack_queue(group, vec![Queued { publish, contact }], NackReason::OwnershipLost, None);
            return;
        }
        let seq = if head.epoch == epoch { head.seq + 1 } else { 1 };
        let key = OrderKey::new(epoch, seq);
        let msg_id = publish.msg_id;
        let ack = publish.ack_requested;
        let message = Arc::new(Message::new(publish.topic, key, publish.payload, msg_id));
        let outcome = self.cache.append_chained(message.clone(), head);
        debug_assert!(matches!(outcome, AppendOutcome::Appended { .. }), "{outcome:?}");
        self.emit(NodeEvent::Assigned { group, epoch, topic: message.topic.clone(), key, msg_id });
        self.out.push_back(NodeOutput::Deliver(message.clone()));
        let live = self.live_peers();
        for &p in &live {
            self.send_to_peer(p, Frame::Replicate(ChainedMessage { message: (*message).clone(), prev: head }));
        }
        let ack_local = ack && contact == Contact::Local;
        if ack_local && self.single() {
            self.ack_local(msg_id, &message.topic, key);
        }
        if live.is_empty() && !self.single() && ack_local {
            // no second copy reachable; let the publisher retry elsewhere
            self.nack_local(msg_id, NackReason::Unavailable, None);
        }
        if !live.is_empty() {
            self.inflight.insert(
                (message.topic.clone(), key),
                Inflight {
                    message,
                    prev: head,
                    unacked: live.into_iter().collect(),
                    ack_to: ack_local.then_some(msg_id),
                    sent_at: now,
                },
            );
        }
    }

    fn on_repl_ack(&mut self, from: ServerId, topic: TopicName, key: OrderKey) {
        let k = (topic, key);
        let Some(inf) = self.inflight.get_mut(&k) else { return };
        inf.unacked.remove(&from);
        if let Some(msg_id) = inf.ack_to.take() {
            let (topic, key) = (inf.message.topic.clone(), inf.message.key);
            self.ack_local(msg_id, &topic, key);
        }
        if self.inflight.get(&k).is_some_and(|i| i.unacked.is_empty()) {
            self.inflight.remove(&k);
        }
    }

    fn retransmit(&mut self, now: Duration) {
        let due: Vec<(ServerId, ChainedMessage)> = self
            .inflight
            .values_mut()
            .filter(|i| now >= i.sent_at + self.cfg.replicate_retry)
            .flat_map(|i| {
                i.sent_at = now;
                let cm = ChainedMessage { message: (*i.message).clone(), prev: i.prev };
                i.unacked.iter().map(move |p| (*p, cm.clone())).collect::<Vec<_>>()
            })
            .collect();
        for (p, cm) in due {
            if self.peer_up(p) {
                self.send_to_peer(p, Frame::Replicate(cm));
            }
        }
    }

    fn on_replicate(&mut self, now: Duration, from: ServerId, cm: ChainedMessage) {
        match self.phase {
            Phase::Running | Phase::Rebuilding => {}
            _ => return,
        }
        let group = self.cache.group_of(&cm.message.topic);
        if self.rounds.contains_key(&group) {
            self.held.entry(group).or_default().push((from, cm));
            return;
        }
        let head = self.cache.head(&cm.message.topic);
        let key = cm.message.key;
        if key <= head {
            if self.cache.contains(&cm.message.topic, key) {
                self.send_to_peer(from, Frame::ReplAck { topic: cm.message.topic, key });
            }
            return;
        }
        if cm.prev > head {
            self.emit(NodeEvent::GapDetected { group, topic: cm.message.topic.clone(), head, prev: cm.prev });
            self.start_round(now, group, Purpose::Follow);
            self.held.entry(group).or_default().push((from, cm));
            return;
        }
        self.apply_remote(from, cm);
    }

    /// Appends a message received from `from` and acknowledges it.
    fn apply_remote(&mut self, from: ServerId, cm: ChainedMessage) {
        let topic = cm.message.topic.clone();
        let key = cm.message.key;
        let message = Arc::new(cm.message);
        match self.cache.append_chained(message.clone(), cm.prev) {
            AppendOutcome::Appended { .. } => self.on_appended(message),
            AppendOutcome::Duplicate => {}
            AppendOutcome::OutOfOrder { .. } => return,
        }
        self.send_to_peer(from, Frame::ReplAck { topic, key });
    }

    fn on_appended(&mut self, message: Arc<Message>) {
        if self.pending.get(&message.msg_id).is_some_and(|p| p.topic == message.topic) {
            self.ack_local(message.msg_id, &message.topic, message.key);
        }
        self.out.push_back(NodeOutput::Deliver(message));
    }

    // ---- acknowledgements ----

    fn ack_local(&mut self, msg_id: MsgId, topic: &TopicName, key: OrderKey) {
        if let Some(p) = self.pending.remove(&msg_id) {
            self.emit(NodeEvent::Acked { topic: topic.clone(), key, msg_id });
            self.out.push_back(NodeOutput::Reply { origin: p.origin, frame: Frame::PubAck { msg_id, key } });
        }
    }

    fn nack_local(&mut self, msg_id: MsgId, reason: NackReason, owner: Option<ServerId>) {
        if let Some(p) = self.pending.remove(&msg_id) {
            self.reply_nack(p.origin, msg_id, reason, owner);
        }
    }

    fn reply_nack(&mut self, origin: Origin, msg_id: MsgId, reason: NackReason, owner: Option<ServerId>) {
        self.out.push_back(NodeOutput::Reply { origin, frame: Frame::PubNack { msg_id, reason, owner } });
    }

    fn nack_queue(&mut self, _group: GroupId, queue: Vec<Queued>, reason: NackReason, owner: Option<ServerId>) {
        for q in queue {
            match q.contact {
                Contact::Local => self.nack_local(q.publish.msg_id, reason, owner),
                Contact::Peer(p) => {
                    if q.publish.ack_requested {
                        self.send_to_peer(p, Frame::PubNack { msg_id: q.publish.msg_id, reason, owner });
                    }
                }
            }
        }
    }

    fn expire_pending(&mut self, now: Duration) {
        let late: Vec<MsgId> = self.pending.iter().filter(|(_, p)| now >= p.deadline).map(|(m, _)| *m).collect();
        for m in late {
            if let Some(p) = self.pending.get(&m) {
                let group = self.cache.group_of(&p.topic);
                if let Some(peer) = p.forwarded_to {
                    self.gossip.invalidate_if(group, peer);
                }
            }
            self.nack_local(m, NackReason::Timeout, None);
        }
        // acks owed for messages no peer will confirm
        let orphaned: Vec<(TopicName, OrderKey)> =
            self.inflight.iter().filter(|(_, i)| i.unacked.is_empty()).map(|(k, _)| k.clone()).collect();
        for k in orphaned {
            if let Some(i) = self.inflight.remove(&k) {
                if let Some(m) = i.ack_to {
                    self.nack_local(m, NackReason::Unavailable, None);
                }
            }
        }
    }

    // ---- reconciliation ----

    fn start_round(&mut self, now: Duration, group: GroupId, purpose: Purpose) {
        if let Some(r) = self.rounds.get_mut(&group) {
            if purpose == Purpose::Takeover {
                r.purpose = Purpose::Takeover;
            }
            r.again = true;
            return;
        }
        let live = self.live_peers();
        let request = self.request_id();
        self.emit(NodeEvent::RoundStarted { group, purpose });
        let known = self.cache.group_heads(group);
        for &p in &live {
            self.send_to_peer(p, Frame::ReconcileReq(ReconcileRequest { request, group, known: known.clone() }));
        }
        self.rounds.insert(
            group,
            Round {
                request,
                purpose,
                waiting: live.into_iter().collect(),
                entries: Vec::new(),
                deadline: now + self.cfg.round_timeout,
                again: false,
            },
        );
        if self.rounds[&group].waiting.is_empty() {
            self.finish_round(now, group);
        }
    }

    fn on_reconcile_req(&mut self, from: ServerId, req: ReconcileRequest) {
        let known: BTreeMap<TopicName, OrderKey> = req.known.into_iter().collect();
        let entries = if self.phase == Phase::Running || self.phase == Phase::Fenced {
            self.cache.group_entries_after(req.group, &known)
        } else {
            Vec::new()
        };
        let chunks = chunk_entries(entries);
        let n = chunks.len();
        for (i, entries) in chunks.into_iter().enumerate() {
            self.send_to_peer(
                from,
                Frame::ReconcileRsp(ReconcileResponse { request: req.request, group: req.group, last: i + 1 == n, entries }),
            );
        }
    }

    fn on_reconcile_rsp(&mut self, now: Duration, from: ServerId, rsp: ReconcileResponse) {
        let Some(r) = self.rounds.get_mut(&rsp.group) else { return };
        if r.request != rsp.request {
            return;
        }
        r.entries.extend(rsp.entries);
        if rsp.last {
            r.waiting.remove(&from);
            if r.waiting.is_empty() {
                self.finish_round(now, rsp.group);
            }
        }
    }

    fn expire_rounds(&mut self, now: Duration) {
        let late: Vec<GroupId> = self.rounds.iter().filter(|(_, r)| now >= r.deadline).map(|(g, _)| *g).collect();
        for g in late {
            let stragglers: Vec<ServerId> =
                self.rounds[&g].waiting.iter().copied().filter(|p| self.peer_up(*p)).collect();
            if !stragglers.is_empty() {
                // a response was lost on a live link; the round must be repeated
                if let Some(r) = self.rounds.get_mut(&g) {
                    r.again = true;
                }
            }
            self.finish_round(now, g);
        }
    }

    fn finish_round(&mut self, now: Duration, group: GroupId) {
        let Some(round) = self.rounds.remove(&group) else { return };
        let heads: BTreeMap<TopicName, OrderKey> = self.cache.group_heads(group).into_iter().collect();
        let merged = merge(round.entries, &heads);
        let mut applied = 0;
        for cm in merged {
            let message = Arc::new(cm.message);
            if let AppendOutcome::Appended { .. } = self.cache.append_chained(message.clone(), cm.prev) {
                applied += 1;
                self.on_appended(message);
            }
        }
        self.emit(NodeEvent::RoundFinished { group, purpose: round.purpose, applied });
        self.flush_held(now, group);
        if round.again {
            self.start_round(now, group, round.purpose);
            return;
        }
        match round.purpose {
            Purpose::Follow => {}
            Purpose::Takeover => {
                if let Some(Stage::Reconciling { epoch }) = self.elections.get(&group).map(|e| e.stage) {
                    self.win(now, group, epoch);
                }
            }
            Purpose::Rebuild => {
                self.rebuild_left.remove(&group);
            }
        }
    }

    /// Applies broadcasts held back during a round, in arrival order.
    fn flush_held(&mut self, _now: Duration, group: GroupId) {
        for (from, cm) in self.held.remove(&group).unwrap_or_default() {
            let head = self.cache.head(&cm.message.topic);
            if cm.message.key <= head {
                if self.cache.contains(&cm.message.topic, cm.message.key) {
                    self.send_to_peer(from, Frame::ReplAck { topic: cm.message.topic, key: cm.message.key });
                }
                continue;
            }
            self.apply_remote(from, cm);
        }
    }
}

#[cfg(test)]
mod tests;
