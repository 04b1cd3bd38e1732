//! Embedded coordination store.
//!
//! Every server hosts one replica. Replicas elect a primary, which orders
//! commands into a log and commits an entry once a majority of replicas
//! hold it. Committed entries are applied by every replica to the same
//! deterministic state machine: ephemeral entries bound to sessions, plain
//! counters updated by compare-and-set, and sessions that expire when their
//! owner stops talking to the primary.
//!
//! Writes are linearizable. Reads are served from the local replica and
//! never go backwards. Watches are one-shot and local to the replica that
//! registered them.
//!
//! The replica is sans-IO: callers feed it messages and the current time,
//! then drain [`KvReplica::take_outbox`] and [`KvReplica::poll_event`].

mod msg;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Duration;

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tracing::{debug, info};

pub use msg::{Command, KvMessage, KvOp, LogEntry, SessionId};

use crate::ids::ServerId;

/// Entries sent in one append.
pub const MAX_APPEND_ENTRIES: usize = 256;

#[derive(Debug, Clone)]
pub struct KvConfig {
    pub heartbeat: Duration,
    pub election_min: Duration,
    pub election_max: Duration,
    /// Silence after which the primary expires a server's sessions.
    pub session_timeout: Duration,
    /// Window within which a majority must have been heard for writes to
    /// count as available.
    pub lease: Duration,
    /// Interval for re-sending uncommitted proposals.
    pub propose_retry: Duration,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            heartbeat: Duration::from_millis(100),
            election_min: Duration::from_millis(500),
            election_max: Duration::from_millis(1000),
            session_timeout: Duration::from_secs(5),
            lease: Duration::from_secs(1),
            propose_retry: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvResult {
    SessionOpened(SessionId),
    Created,
    AlreadyExists,
    SessionExpired,
    Ok,
    Conflict(u64),
    Deleted,
    NotFound,
    Expired { deleted: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KvError {
    #[error("cas requires new > expected (got {expected} -> {new})")]
    InvalidCas { expected: u64, new: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchKind {
    Created,
    Changed,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvEvent {
    /// A command submitted by this replica was committed and applied.
    Completed { request: u64, result: KvResult },
    /// A watched key changed; the watch is consumed.
    WatchFired { key: String, kind: WatchKind },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub value: Bytes,
    pub ephemeral: Option<SessionId>,
    pub version: u64,
}

/// The replicated state machine.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct KvState {
    entries: BTreeMap<String, KvEntry>,
    sessions: BTreeMap<SessionId, ServerId>,
    results: BTreeMap<(ServerId, u64), KvResult>,
}

impl KvState {
    pub fn get(&self, key: &str) -> Option<&KvEntry> {
        self.entries.get(key)
    }

    pub fn counter(&self, key: &str) -> u64 {
        self.entries.get(key).map_or(0, |e| decode_counter(&e.value))
    }

    pub fn session_owner(&self, session: SessionId) -> Option<ServerId> {
        self.sessions.get(&session).copied()
    }

    pub fn sessions(&self) -> impl Iterator<Item = (SessionId, ServerId)> + '_ {
        self.sessions.iter().map(|(s, o)| (*s, *o))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Applies one committed command. Returns its result and the keys it
    /// touched. A command seen before returns its stored result unchanged.
    pub fn apply(&mut self, index: u64, cmd: &Command) -> (KvResult, Vec<(String, WatchKind)>) {
        if let Some(r) = self.results.get(&(cmd.origin, cmd.request)) {
            return (r.clone(), Vec::new());
        }
        let mut touched = Vec::new();
        let result = match &cmd.op {
            KvOp::Noop => KvResult::Ok,
            KvOp::OpenSession => {
                let s = SessionId(index);
                self.sessions.insert(s, cmd.origin);
                KvResult::SessionOpened(s)
            }
            KvOp::ExpireSession { session } => {
                if self.sessions.remove(session).is_some() {
                    let doomed: Vec<String> = self
                        .entries
                        .iter()
                        .filter(|(_, e)| e.ephemeral == Some(*session))
                        .map(|(k, _)| k.clone())
                        .collect();
                    for k in &doomed {
                        self.entries.remove(k);
                        touched.push((k.clone(), WatchKind::Deleted));
                    }
                    KvResult::Expired { deleted: doomed.len() }
                } else {
                    KvResult::NotFound
                }
            }
            KvOp::CreateEphemeral { key, value, session } => {
                if !self.sessions.contains_key(session) {
                    KvResult::SessionExpired
                } else if self.entries.contains_key(key) {
                    KvResult::AlreadyExists
                } else {
                    self.entries
                        .insert(key.clone(), KvEntry { value: value.clone(), ephemeral: Some(*session), version: 1 });
                    touched.push((key.clone(), WatchKind::Created));
                    KvResult::Created
                }
            }
            KvOp::Delete { key } => {
                if self.entries.remove(key).is_some() {
                    touched.push((key.clone(), WatchKind::Deleted));
                    KvResult::Deleted
                } else {
                    KvResult::NotFound
                }
            }
            KvOp::Cas { key, expected, new } => {
                let current = self.counter(key);
                if current != *expected {
                    KvResult::Conflict(current)
                } else {
                    let value = Bytes::copy_from_slice(&new.to_be_bytes());
                    match self.entries.get_mut(key) {
                        Some(e) => {
                            e.value = value;
                            e.version += 1;
                            touched.push((key.clone(), WatchKind::Changed));
                        }
                        None => {
                            self.entries.insert(key.clone(), KvEntry { value, ephemeral: None, version: 1 });
                            touched.push((key.clone(), WatchKind::Created));
                        }
                    }
                    KvResult::Ok
                }
            }
        };
        self.results.insert((cmd.origin, cmd.request), result.clone());
        (result, touched)
    }
}

fn decode_counter(b: &[u8]) -> u64 {
    b.try_into().map(u64::from_be_bytes).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Follower,
    PreCandidate,
    Candidate,
    Leader,
}

struct Pending {
    command: Command,
    sent_at: Option<Duration>,
}

pub struct KvReplica {
    id: ServerId,
    peers: Vec<ServerId>,
    cfg: KvConfig,
    rng: ChaCha8Rng,

    term: u64,
    voted_for: Option<ServerId>,
    role: Role,
    leader: Option<ServerId>,
    log: Vec<LogEntry>,
    commit: u64,
    applied: u64,
    state: KvState,

    votes: BTreeSet<ServerId>,
    next_index: BTreeMap<ServerId, u64>,
    match_index: BTreeMap<ServerId, u64>,
    /// Last time each peer was heard from.
    heard: BTreeMap<ServerId, Duration>,
    last_leader_contact: Option<Duration>,
    election_deadline: Duration,
    heartbeat_due: Duration,
    started: Duration,
    /// Set for a replica that lost its state; it stays out of elections
    /// until it has heard from a primary.
    rejoining: bool,
    expiring: BTreeMap<SessionId, Duration>,

    next_request: u64,
    pending: BTreeMap<u64, Pending>,
    watches: BTreeSet<String>,
    outbox: Vec<(ServerId, KvMessage)>,
    events: VecDeque<KvEvent>,
}

impl KvReplica {
    /// `members` lists every replica, this one included. Request ids are
    /// drawn from `seed`, so a restarted replica needs a fresh seed.
    pub fn new(id: ServerId, members: &[ServerId], cfg: KvConfig, seed: u64, now: Duration) -> Self {
        let peers: Vec<ServerId> = members.iter().copied().filter(|m| *m != id).collect::<BTreeSet<_>>().into_iter().collect();
        let mut r = Self {
            id,
            peers,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (u64::from(id.0) << 48)),
            term: 0,
            voted_for: None,
            role: Role::Follower,
            leader: None,
            log: Vec::new(),
            commit: 0,
            applied: 0,
            state: KvState::default(),
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            heard: BTreeMap::new(),
            last_leader_contact: None,
            election_deadline: now,
            heartbeat_due: now,
            started: now,
            rejoining: false,
            expiring: BTreeMap::new(),
            next_request: 1,
            pending: BTreeMap::new(),
            watches: BTreeSet::new(),
            outbox: Vec::new(),
            events: VecDeque::new(),
        };
        r.next_request = u64::from(r.rng.gen::<u32>()) << 32;
        if r.peers.is_empty() {
            r.become_leader(now);
        } else {
            r.reset_election_timer(now);
        }
        r
    }

    /// A replica restarted without its previous state.
    pub fn rejoin(id: ServerId, members: &[ServerId], cfg: KvConfig, seed: u64, now: Duration) -> Self {
        let mut r = Self::new(id, members, cfg, seed, now);
        r.rejoining = !r.peers.is_empty();
        r
    }

    pub fn id(&self) -> ServerId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn leader(&self) -> Option<ServerId> {
        self.leader
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn commit_index(&self) -> u64 {
        self.commit
    }

    pub fn state(&self) -> &KvState {
        &self.state
    }

    pub fn get(&self, key: &str) -> Option<(Bytes, u64)> {
        self.state.get(key).map(|e| (e.value.clone(), e.version))
    }

    pub fn counter(&self, key: &str) -> u64 {
        self.state.counter(key)
    }

    fn majority(&self) -> usize {
        self.peers.len().div_ceil(2) + 1
    }

    /// Whether a write submitted now can reach a majority.
    pub fn local_write_available(&self, now: Duration) -> bool {
        let fresh = |t: &Duration| now.saturating_sub(*t) < self.cfg.lease;
        match self.role {
            Role::Leader => {
                let acked = self.peers.iter().filter(|p| self.heard.get(p).is_some_and(fresh)).count();
                acked + 1 >= self.majority()
            }
            _ => self.leader.is_some() && self.last_leader_contact.as_ref().is_some_and(fresh),
        }
    }

    pub fn open_session(&mut self, now: Duration) -> u64 {
        self.submit(now, KvOp::OpenSession)
    }

    pub fn expire_session(&mut self, now: Duration, session: SessionId) -> u64 {
        self.submit(now, KvOp::ExpireSession { session })
    }

    pub fn create_ephemeral(&mut self, now: Duration, key: &str, value: Bytes, session: SessionId) -> u64 {
        self.submit(now, KvOp::CreateEphemeral { key: key.to_owned(), value, session })
    }

    pub fn delete(&mut self, now: Duration, key: &str) -> u64 {
        self.submit(now, KvOp::Delete { key: key.to_owned() })
    }

    pub fn cas_counter(&mut self, now: Duration, key: &str, expected: u64, new: u64) -> Result<u64, KvError> {
        if new <= expected {
            return Err(KvError::InvalidCas { expected, new });
        }
        Ok(self.submit(now, KvOp::Cas { key: key.to_owned(), expected, new }))
    }

    /// Registers a one-shot watch on `key`.
    pub fn watch(&mut self, key: &str) {
        self.watches.insert(key.to_owned());
    }

    /// Stops waiting for a submitted command. It may still be applied.
    pub fn cancel(&mut self, request: u64) {
        self.pending.remove(&request);
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn submit(&mut self, now: Duration, op: KvOp) -> u64 {
        let request = self.next_request;
        self.next_request += 1;
        let command = Command { origin: self.id, request, op };
        self.pending.insert(request, Pending { command: command.clone(), sent_at: None });
        self.route_proposal(now, command);
        if let Some(p) = self.pending.get_mut(&request) {
            p.sent_at = Some(now);
        }
        request
    }

    fn route_proposal(&mut self, now: Duration, command: Command) {
        match (self.role, self.leader) {
            (Role::Leader, _) => self.leader_append(now, command),
            (_, Some(l)) => self.outbox.push((l, KvMessage::Propose { command })),
            _ => {}
        }
    }

    fn leader_append(&mut self, now: Duration, command: Command) {
        let key = (command.origin, command.request);
        if self.state.results.contains_key(&key)
            || self.log[self.commit as usize..].iter().any(|e| (e.command.origin, e.command.request) == key)
        {
            return;
        }
        self.log.push(LogEntry { term: self.term, command });
        self.advance_commit(now);
        self.broadcast_append();
    }

    pub fn take_outbox(&mut self) -> Vec<(ServerId, KvMessage)> {
        std::mem::take(&mut self.outbox)
    }

    pub fn poll_event(&mut self) -> Option<KvEvent> {
        self.events.pop_front()
    }

    pub fn next_deadline(&self) -> Duration {
        match self.role {
            Role::Leader => self.heartbeat_due,
            _ => self.election_deadline,
        }
    }

    pub fn tick(&mut self, now: Duration) {
        match self.role {
            Role::Leader => {
                if now >= self.heartbeat_due {
                    self.broadcast_append();
                    self.heartbeat_due = now + self.cfg.heartbeat;
                }
                self.expire_silent_sessions(now);
            }
            _ => {
                if now >= self.election_deadline {
                    self.start_pre_vote(now);
                }
            }
        }
        self.retry_proposals(now);
    }

    fn retry_proposals(&mut self, now: Duration) {
        let Some(leader) = self.leader else { return };
        let due: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| p.sent_at.is_none_or(|t| now >= t + self.cfg.propose_retry))
            .map(|(r, _)| *r)
            .collect();
        for r in due {
            let Some(p) = self.pending.get_mut(&r) else { continue };
            p.sent_at = Some(now);
            let command = p.command.clone();
            if self.role == Role::Leader {
                self.leader_append(now, command);
            } else {
                self.outbox.push((leader, KvMessage::Propose { command }));
            }
        }
    }

    fn expire_silent_sessions(&mut self, now: Duration) {
        let silent: Vec<SessionId> = self
            .state
            .sessions
            .iter()
            .filter(|(_, owner)| {
                **owner != self.id
                    && self.heard.get(owner).is_none_or(|t| now.saturating_sub(*t) >= self.cfg.session_timeout)
            })
            .map(|(s, _)| *s)
            .filter(|s| self.expiring.get(s).is_none_or(|t| now >= *t + self.cfg.session_timeout))
            .collect();
        for s in silent {
            info!(replica = %self.id, session = %s, "expiring silent session");
            self.expiring.insert(s, now);
            let request = self.next_request;
            self.next_request += 1;
            self.leader_append(now, Command { origin: self.id, request, op: KvOp::ExpireSession { session: s } });
        }
    }

    fn reset_election_timer(&mut self, now: Duration) {
        let min = self.cfg.election_min.as_micros() as u64;
        let max = self.cfg.election_max.as_micros() as u64;
        let wait = self.rng.gen_range(min..max.max(min + 1));
        self.election_deadline = now + Duration::from_micros(wait);
    }

    fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn term_at(&self, index: u64) -> Option<u64> {
        match index {
            0 => Some(0),
            i => self.log.get(i as usize - 1).map(|e| e.term),
        }
    }

    fn log_up_to_date(&self, last_index: u64, last_term: u64) -> bool {
        (last_term, last_index) >= (self.last_term(), self.last_index())
    }

    /// Votes are withheld while a primary was heard recently, during the
    /// first election timeout after start, and while rejoining.
    fn may_vote(&self, now: Duration) -> bool {
        if self.rejoining || now < self.started + self.cfg.election_min {
            return false;
        }
        if self.role == Role::Leader {
            return false;
        }
        self.last_leader_contact.is_none_or(|t| now.saturating_sub(t) >= self.cfg.election_min)
    }

    fn start_pre_vote(&mut self, now: Duration) {
        self.reset_election_timer(now);
        if self.rejoining {
            return;
        }
        self.role = Role::PreCandidate;
        self.votes = BTreeSet::from([self.id]);
        let msg = KvMessage::PreVote { term: self.term + 1, last_index: self.last_index(), last_term: self.last_term() };
        for &p in &self.peers {
            self.outbox.push((p, msg.clone()));
        }
    }

    fn start_election(&mut self, now: Duration) {
        self.term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader = None;
        self.votes = BTreeSet::from([self.id]);
        self.reset_election_timer(now);
        debug!(replica = %self.id, term = self.term, "starting election");
        let msg = KvMessage::Vote { term: self.term, last_index: self.last_index(), last_term: self.last_term() };
        for &p in &self.peers {
            self.outbox.push((p, msg.clone()));
        }
    }

    fn become_leader(&mut self, now: Duration) {
        info!(replica = %self.id, term = self.term, "became primary");
        self.role = Role::Leader;
        self.leader = Some(self.id);
        let next = self.last_index() + 1;
        for &p in &self.peers {
            self.next_index.insert(p, next);
            self.match_index.insert(p, 0);
            self.heard.insert(p, now);
        }
        self.expiring.clear();
        let request = self.next_request;
        self.next_request += 1;
        self.log.push(LogEntry { term: self.term, command: Command { origin: self.id, request, op: KvOp::Noop } });
        self.advance_commit(now);
        self.broadcast_append();
        self.heartbeat_due = now + self.cfg.heartbeat;
        let pending: Vec<Command> = self.pending.values().map(|p| p.command.clone()).collect();
        for c in pending {
            self.leader_append(now, c);
        }
    }

    fn step_down(&mut self, now: Duration, term: u64, leader: Option<ServerId>) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        if self.role != Role::Follower {
            debug!(replica = %self.id, term, "stepping down");
        }
        self.role = Role::Follower;
        self.leader = leader;
        self.reset_election_timer(now);
    }

    fn broadcast_append(&mut self) {
        for p in self.peers.clone() {
            self.send_append(p);
        }
    }

    fn send_append(&mut self, peer: ServerId) {
        let next = self.next_index.get(&peer).copied().unwrap_or(1).max(1);
        let prev_index = next - 1;
        let prev_term = self.term_at(prev_index).unwrap_or(0);
        let end = (prev_index as usize + MAX_APPEND_ENTRIES).min(self.log.len());
        let entries = self.log[prev_index as usize..end].to_vec();
        self.outbox.push((
            peer,
            KvMessage::Append { term: self.term, prev_index, prev_term, commit: self.commit, entries },
        ));
    }

    fn advance_commit(&mut self, now: Duration) {
        if self.role != Role::Leader {
            return;
        }
        let mut matched: Vec<u64> = self.peers.iter().map(|p| self.match_index.get(p).copied().unwrap_or(0)).collect();
        matched.push(self.last_index());
        matched.sort_unstable_by(|a, b| b.cmp(a));
        let n = matched[self.majority() - 1];
        if n > self.commit && self.term_at(n) == Some(self.term) {
            self.commit = n;
            self.apply_committed(now);
            if !self.peers.is_empty() {
                // followers learn the new commit index without waiting for a heartbeat
                self.broadcast_append();
            }
        }
    }

    fn apply_committed(&mut self, _now: Duration) {
        while self.applied < self.commit {
            self.applied += 1;
            let entry = &self.log[self.applied as usize - 1];
            let command = entry.command.clone();
            let (result, touched) = self.state.apply(self.applied, &command);
            if command.origin == self.id && self.pending.remove(&command.request).is_some() {
                self.events.push_back(KvEvent::Completed { request: command.request, result });
            }
            for (key, kind) in touched {
                if self.watches.remove(&key) {
                    self.events.push_back(KvEvent::WatchFired { key, kind });
                }
            }
        }
    }

    pub fn handle_message(&mut self, now: Duration, from: ServerId, msg: KvMessage) {
        if !self.peers.contains(&from) {
            return;
        }
        self.heard.insert(from, now);
        match msg {
            KvMessage::PreVote { term, last_index, last_term } => {
                let granted = term > self.term && self.may_vote(now) && self.log_up_to_date(last_index, last_term);
                self.outbox.push((from, KvMessage::PreVoteReply { term, granted }));
            }
            KvMessage::PreVoteReply { term, granted } => {
                if self.role == Role::PreCandidate && granted && term == self.term + 1 {
                    self.votes.insert(from);
                    if self.votes.len() >= self.majority() {
                        self.start_election(now);
                    }
                }
            }
            KvMessage::Vote { term, last_index, last_term } => {
                if term > self.term && !self.may_vote(now) {
                    // a recently heard primary outranks a disruptive candidate
                    self.outbox.push((from, KvMessage::VoteReply { term: self.term, granted: false }));
                    return;
                }
                if term > self.term {
                    self.step_down(now, term, None);
                }
                let granted = term == self.term
                    && self.voted_for.is_none_or(|v| v == from)
                    && self.log_up_to_date(last_index, last_term);
                if granted {
                    self.voted_for = Some(from);
                    self.reset_election_timer(now);
                }
                self.outbox.push((from, KvMessage::VoteReply { term: self.term, granted }));
            }
            KvMessage::VoteReply { term, granted } => {
                if term > self.term {
                    self.step_down(now, term, None);
                } else if self.role == Role::Candidate && term == self.term && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.majority() {
                        self.become_leader(now);
                    }
                }
            }
            KvMessage::Append { term, prev_index, prev_term, commit, entries } => {
                self.on_append(now, from, term, prev_index, prev_term, commit, entries);
            }
            KvMessage::AppendReply { term, success, match_index } => {
                if term > self.term {
                    self.step_down(now, term, None);
                    return;
                }
                if self.role != Role::Leader || term < self.term {
                    return;
                }
                if success {
                    let m = self.match_index.entry(from).or_insert(0);
                    *m = (*m).max(match_index);
                    self.next_index.insert(from, *m + 1);
                    self.advance_commit(now);
                    if self.next_index[&from] <= self.last_index() {
                        self.send_append(from);
                    }
                } else {
                    let next = self.next_index.get(&from).copied().unwrap_or(1);
                    let hinted = (match_index + 1).min(next.saturating_sub(1)).max(1);
                    self.next_index.insert(from, hinted);
                    self.send_append(from);
                }
            }
            KvMessage::Propose { command } => {
                if self.role == Role::Leader {
                    self.leader_append(now, command);
                } else if let Some(l) = self.leader.filter(|l| *l != from) {
                    self.outbox.push((l, KvMessage::Propose { command }));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_append(
        &mut self,
        now: Duration,
        from: ServerId,
        term: u64,
        prev_index: u64,
        prev_term: u64,
        commit: u64,
        entries: Vec<LogEntry>,
    ) {
        if term < self.term {
            self.outbox.push((from, KvMessage::AppendReply { term: self.term, success: false, match_index: 0 }));
            return;
        }
        let new_leader = self.leader != Some(from);
        self.step_down(now, term, Some(from));
        self.last_leader_contact = Some(now);
        self.rejoining = false;
        if new_leader {
            // proposals sent to a previous primary may have been lost
            for p in self.pending.values_mut() {
                p.sent_at = None;
            }
        }
        if self.term_at(prev_index) != Some(prev_term) {
            let hint = if prev_index > self.last_index() { self.last_index() } else { prev_index.saturating_sub(1) };
            self.outbox.push((from, KvMessage::AppendReply { term: self.term, success: false, match_index: hint }));
            return;
        }
        let mut index = prev_index;
        for e in entries {
            index += 1;
            match self.term_at(index) {
                Some(t) if t == e.term => {}
                Some(_) => {
                    self.log.truncate(index as usize - 1);
                    self.log.push(e);
                }
                None => self.log.push(e),
            }
        }
        let new_commit = commit.min(index);
        if new_commit > self.commit {
            self.commit = new_commit;
            self.apply_committed(now);
        }
        self.outbox.push((from, KvMessage::AppendReply { term: self.term, success: true, match_index: index }));
        self.retry_proposals(now);
    }
}
