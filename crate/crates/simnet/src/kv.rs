//! Coordination-store harness: three replicas, a handful of clients issuing
//! one operation at a time, seeded link delays, one crash and one
//! partition per run. Produces a history for [`crate::linearizability`].

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::time::Duration;

use bytes::Bytes;
use migrant_core::coordkv::{KvConfig, KvEvent, KvMessage, KvOp, KvReplica, KvResult, SessionId};
use migrant_core::ServerId;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linearizability::{self, HistoryOp, KvCall, Model, Violation};

const EPHEMERAL_KEYS: [&str; 3] = ["k0", "k1", "k2"];
const COUNTERS: [&str; 2] = ["c0", "c1"];

#[derive(Debug, Clone)]
pub struct KvScenario {
    pub seed: u64,
    pub replicas: usize,
    pub clients_per_replica: usize,
    pub link_min: Duration,
    pub link_max: Duration,
    /// Clients issue operations during `[workload_start, workload_stop)`.
    pub workload_start: Duration,
    pub workload_stop: Duration,
    /// An operation without an answer after this long is abandoned.
    pub op_timeout: Duration,
    pub faults: bool,
}

impl Default for KvScenario {
    fn default() -> Self {
        Self {
            seed: 1,
            replicas: 3,
            clients_per_replica: 2,
            link_min: Duration::from_millis(1),
            link_max: Duration::from_millis(10),
            workload_start: Duration::from_secs(3),
            workload_stop: Duration::from_secs(15),
            op_timeout: Duration::from_secs(3),
            faults: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvFault {
    Crash(usize),
    Restart(usize),
    Isolate(usize),
    Heal,
}

#[derive(Debug, Clone)]
pub struct KvRun {
    pub initial: Model,
    pub history: Vec<HistoryOp>,
    pub faults: Vec<(Duration, KvFault)>,
}

impl KvRun {
    pub fn check(&self) -> Result<(), Violation> {
        linearizability::check(&self.initial, &self.history)
    }

    pub fn completed(&self) -> usize {
        self.history.iter().filter(|o| o.returned.is_some()).count()
    }
}

#[derive(Debug)]
enum Ev {
    Msg { from: usize, to: usize, inc: (u32, u32), msg: KvMessage },
    Timer(usize),
    Client(usize),
    Fault(KvFault),
}

struct Replica {
    kv: Option<KvReplica>,
    incarnation: u32,
    timer_at: Option<Duration>,
}

struct Client {
    host: usize,
    /// (request, history index) of the operation in flight.
    inflight: Option<(u64, usize)>,
    /// Incarnation of the host the request went to.
    sent_to: u32,
}

struct Sim {
    sc: KvScenario,
    cfg: KvConfig,
    now: Duration,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(Duration, u64, usize)>>,
    events: Vec<Option<Ev>>,
    replicas: Vec<Replica>,
    clients: Vec<Client>,
    isolated: Option<usize>,
    link_last: BTreeMap<(usize, usize), Duration>,
    sessions: Vec<SessionId>,
    history: Vec<HistoryOp>,
}

fn members(n: usize) -> Vec<ServerId> {
    (1..=n).map(|i| ServerId(i as u16)).collect()
}

impl Sim {
    fn schedule(&mut self, at: Duration, ev: Ev) {
        let idx = self.events.len();
        self.events.push(Some(ev));
        self.queue.push(Reverse((at, idx as u64, idx)));
    }

    fn seed_for(&self, r: usize) -> u64 {
        self.sc.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((r as u64) << 8) ^ u64::from(self.replicas[r].incarnation)
    }

    fn drive(&mut self, r: usize) {
        let now = self.now;
        let Some(kv) = self.replicas[r].kv.as_mut() else { return };
        let out = kv.take_outbox();
        let mut done = Vec::new();
        while let Some(e) = kv.poll_event() {
            if let KvEvent::Completed { request, result } = e {
                done.push((request, result));
            }
        }
        let deadline = kv.next_deadline().max(now + Duration::from_millis(1));
        let inc = self.replicas[r].incarnation;
        for (to, msg) in out {
            let to = usize::from(to.0) - 1;
            if self.isolated.is_some_and(|i| i == r || i == to) {
                continue;
            }
            let delay = self.rng.gen_range(self.sc.link_min..=self.sc.link_max);
            let last = self.link_last.entry((r, to)).or_default();
            let at = (now + delay).max(*last);
            *last = at;
            let dst = self.replicas[to].incarnation;
            self.schedule(at, Ev::Msg { from: r, to, inc: (inc, dst), msg });
        }
        for (request, result) in done {
            self.complete(r, request, result);
        }
        if self.replicas[r].timer_at.is_none_or(|t| t > deadline || t <= now) {
            self.replicas[r].timer_at = Some(deadline);
            self.schedule(deadline, Ev::Timer(r));
        }
    }

    fn complete(&mut self, r: usize, request: u64, result: KvResult) {
        let now = self.now;
        let inc = self.replicas[r].incarnation;
        let Some(c) = self
            .clients
            .iter()
            .position(|c| c.host == r && c.sent_to == inc && c.inflight.is_some_and(|(q, _)| q == request))
        else {
            if let KvResult::SessionOpened(s) = result {
                self.sessions.push(s);
            }
            return;
        };
        let (_, h) = self.clients[c].inflight.take().expect("matched in-flight op");
        self.history[h].returned = Some((now, result));
        let think = Duration::from_millis(self.rng.gen_range(0..40));
        self.schedule(now + think, Ev::Client(c));
    }

    fn next_call(&mut self, c: usize) -> KvCall {
        let host = self.clients[c].host;
        let kv = self.replicas[host].kv.as_ref().expect("live host");
        let roll = self.rng.gen_range(0..100);
        let own = self.sessions[c % self.sessions.len()];
        if roll < 40 {
            let key = (*EPHEMERAL_KEYS.choose(&mut self.rng).expect("non-empty")).to_owned();
            // mostly the client's own session, sometimes a foreign one
            let session = if self.rng.gen_bool(0.8) { own } else { *self.sessions.choose(&mut self.rng).expect("opened") };
            KvCall::CreateEphemeral { key, session }
        } else if roll < 80 {
            let key = (*COUNTERS.choose(&mut self.rng).expect("non-empty")).to_owned();
            // local reads may be stale, which is what makes conflicts likely
            let expected = kv.counter(&key);
            let new = expected + 1 + self.rng.gen_range(0..2);
            KvCall::Cas { key, expected, new }
        } else if roll < 97 {
            KvCall::Delete { key: (*EPHEMERAL_KEYS.choose(&mut self.rng).expect("non-empty")).to_owned() }
        } else {
            KvCall::ExpireSession { session: *self.sessions.choose(&mut self.rng).expect("opened") }
        }
    }

    fn client_step(&mut self, c: usize) {
        let now = self.now;
        if let Some((request, h)) = self.clients[c].inflight {
            // timeout check
            if now >= self.history[h].invoked + self.sc.op_timeout {
                let host = self.clients[c].host;
                if self.replicas[host].incarnation == self.clients[c].sent_to {
                    if let Some(kv) = self.replicas[host].kv.as_mut() {
                        kv.cancel(request);
                    }
                }
                self.clients[c].inflight = None;
            } else {
                return;
            }
        }
        if now >= self.sc.workload_stop {
            return;
        }
        let host = self.clients[c].host;
        if self.replicas[host].kv.is_none() {
            self.schedule(now + Duration::from_millis(100), Ev::Client(c));
            return;
        }
        let call = self.next_call(c);
        let op = match &call {
            KvCall::CreateEphemeral { key, session } => {
                KvOp::CreateEphemeral { key: key.clone(), value: Bytes::from_static(b"v"), session: *session }
            }
            KvCall::Cas { key, expected, new } => KvOp::Cas { key: key.clone(), expected: *expected, new: *new },
            KvCall::Delete { key } => KvOp::Delete { key: key.clone() },
            KvCall::ExpireSession { session } => KvOp::ExpireSession { session: *session },
        };
        let kv = self.replicas[host].kv.as_mut().expect("checked");
        let request = kv.submit(now, op);
        self.history.push(HistoryOp { client: c, call, invoked: now, returned: None });
        self.clients[c].inflight = Some((request, self.history.len() - 1));
        self.clients[c].sent_to = self.replicas[host].incarnation;
        self.schedule(now + self.sc.op_timeout, Ev::Client(c));
        self.drive(host);
    }

    fn fault(&mut self, f: KvFault) {
        let now = self.now;
        match f {
            KvFault::Crash(r) => {
                self.replicas[r].kv = None;
                self.replicas[r].incarnation += 1;
                self.replicas[r].timer_at = None;
                // clients of the crashed host lose their answers
                for c in self.clients.iter_mut().filter(|c| c.host == r) {
                    c.inflight = None;
                }
                let waiting: Vec<usize> = (0..self.clients.len()).filter(|&c| self.clients[c].host == r).collect();
                for c in waiting {
                    self.schedule(now + Duration::from_millis(100), Ev::Client(c));
                }
            }
            KvFault::Restart(r) => {
                let seed = self.seed_for(r);
                self.replicas[r].kv = Some(KvReplica::rejoin(ServerId(r as u16 + 1), &members(self.sc.replicas), self.cfg.clone(), seed, now));
                self.drive(r);
            }
            KvFault::Isolate(r) => self.isolated = Some(r),
            KvFault::Heal => self.isolated = None,
        }
    }

    fn step(&mut self) -> bool {
        let Some(Reverse((at, _, idx))) = self.queue.pop() else { return false };
        self.now = at;
        let ev = self.events[idx].take().expect("each event fires once");
        match ev {
            Ev::Timer(r) => {
                if self.replicas[r].timer_at != Some(at) {
                    return true;
                }
                self.replicas[r].timer_at = None;
                if let Some(kv) = self.replicas[r].kv.as_mut() {
                    kv.tick(at);
                    self.drive(r);
                }
            }
            Ev::Msg { from, to, inc, msg } => {
                if self.replicas[from].incarnation != inc.0 || self.replicas[to].incarnation != inc.1 {
                    return true;
                }
                if self.isolated.is_some_and(|i| i == from || i == to) {
                    return true;
                }
                if let Some(kv) = self.replicas[to].kv.as_mut() {
                    kv.handle_message(at, ServerId(from as u16 + 1), msg);
                    self.drive(to);
                }
            }
            Ev::Client(c) => self.client_step(c),
            Ev::Fault(f) => self.fault(f),
        }
        true
    }

    fn run_until(&mut self, until: Duration) {
        while let Some(Reverse((at, _, _))) = self.queue.peek() {
            if *at > until {
                break;
            }
            self.step();
        }
        self.now = self.now.max(until);
    }
}

/// One crash-and-restart of a random replica and one isolation of a random
/// replica, never overlapping.
fn fault_plan(rng: &mut ChaCha8Rng, sc: &KvScenario) -> Vec<(Duration, KvFault)> {
    if !sc.faults {
        return Vec::new();
    }
    let ms = |v: u64| Duration::from_millis(v);
    let span = sc.workload_stop.saturating_sub(sc.workload_start).as_millis() as u64;
    let half = span / 2;
    let mut plan = Vec::new();
    let windows = [(sc.workload_start, half), (sc.workload_start + ms(half), span - half)];
    let crash_first = rng.gen_bool(0.5);
    for (n, (start, len)) in windows.into_iter().enumerate() {
        let r = rng.gen_range(0..sc.replicas);
        let at = start + ms(rng.gen_range(0..len / 3));
        let back = at + ms(rng.gen_range(len / 4..len / 2));
        if (n == 0) == crash_first {
            plan.push((at, KvFault::Crash(r)));
            plan.push((back, KvFault::Restart(r)));
        } else {
            plan.push((at, KvFault::Isolate(r)));
            plan.push((back, KvFault::Heal));
        }
    }
    plan
}

pub fn run(sc: &KvScenario) -> KvRun {
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let faults = fault_plan(&mut rng, sc);
    // sessions must outlive the run; expiry is exercised explicitly
    let cfg = KvConfig { session_timeout: Duration::from_secs(3600), ..KvConfig::default() };
    let n = sc.replicas;
    let mut sim = Sim {
        sc: sc.clone(),
        cfg: cfg.clone(),
        now: Duration::ZERO,
        rng,
        queue: BinaryHeap::new(),
        events: Vec::new(),
        replicas: (0..n).map(|_| Replica { kv: None, incarnation: 0, timer_at: None }).collect(),
        clients: (0..n * sc.clients_per_replica).map(|c| Client { host: c % n, inflight: None, sent_to: 0 }).collect(),
        isolated: None,
        link_last: BTreeMap::new(),
        sessions: Vec::new(),
        history: Vec::new(),
    };
    for r in 0..n {
        let seed = sim.seed_for(r);
        sim.replicas[r].kv = Some(KvReplica::new(ServerId(r as u16 + 1), &members(n), cfg.clone(), seed, Duration::ZERO));
        sim.drive(r);
    }
    // open one session per client before the workload starts
    let mut t = Duration::from_millis(100);
    while sim.sessions.len() < sim.clients.len() && t < sc.workload_start {
        sim.run_until(t);
        let have = sim.sessions.len();
        let leader = (0..n).find(|&r| sim.replicas[r].kv.as_ref().is_some_and(KvReplica::is_leader));
        if let (Some(r), true) = (leader, have < sim.clients.len()) {
            let kv = sim.replicas[r].kv.as_mut().expect("leader is live");
            if !kv.has_pending() {
                for _ in have..sim.clients.len() {
                    kv.open_session(t);
                }
                sim.drive(r);
            }
        }
        t += Duration::from_millis(100);
    }
    assert!(!sim.sessions.is_empty(), "no session opened before the workload");
    sim.sessions.sort();
    sim.sessions.dedup();
    let initial = Model::with_sessions(sim.sessions.iter().copied());
    for (at, f) in &faults {
        sim.schedule(*at, Ev::Fault(f.clone()));
    }
    let start = sc.workload_start.max(sim.now);
    for c in 0..sim.clients.len() {
        let jitter = Duration::from_millis(sim.rng.gen_range(0..20));
        sim.schedule(start + jitter, Ev::Client(c));
    }
    sim.run_until(sc.workload_stop + sc.op_timeout + Duration::from_secs(1));
    KvRun { initial, history: sim.history, faults }
}
