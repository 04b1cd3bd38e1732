//! Linearizability checking of coordination-store histories.
//!
//! Wing-Gong search with memoisation of (linearized set, model state), as
//! refined by Lowe. An operation that never returned may take effect at any
//! point after its invocation, or not at all.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::time::Duration;

use migrant_core::coordkv::{KvResult, SessionId};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KvCall {
    CreateEphemeral { key: String, session: SessionId },
    Cas { key: String, expected: u64, new: u64 },
    Delete { key: String },
    ExpireSession { session: SessionId },
}

impl fmt::Display for KvCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KvCall::CreateEphemeral { key, session } => write!(f, "create {key} s{}", session.0),
            KvCall::Cas { key, expected, new } => write!(f, "cas {key} {expected}->{new}"),
            KvCall::Delete { key } => write!(f, "delete {key}"),
            KvCall::ExpireSession { session } => write!(f, "expire s{}", session.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryOp {
    pub client: usize,
    pub call: KvCall,
    pub invoked: Duration,
    /// `None` for an operation that never returned.
    pub returned: Option<(Duration, KvResult)>,
}

/// Sequential specification of the store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Model {
    pub sessions: BTreeSet<SessionId>,
    pub ephemeral: BTreeMap<String, SessionId>,
    pub counters: BTreeMap<String, u64>,
}

impl Model {
    pub fn with_sessions(sessions: impl IntoIterator<Item = SessionId>) -> Self {
        Self { sessions: sessions.into_iter().collect(), ..Self::default() }
    }

    pub fn step(&mut self, call: &KvCall) -> KvResult {
        match call {
            KvCall::CreateEphemeral { key, session } => {
                if !self.sessions.contains(session) {
                    KvResult::SessionExpired
                } else if self.ephemeral.contains_key(key) || self.counters.contains_key(key) {
                    KvResult::AlreadyExists
                } else {
                    self.ephemeral.insert(key.clone(), *session);
                    KvResult::Created
                }
            }
            KvCall::Cas { key, expected, new } => {
                let current = self.counters.get(key).copied().unwrap_or(0);
                if current != *expected {
                    KvResult::Conflict(current)
                } else {
                    self.counters.insert(key.clone(), *new);
                    KvResult::Ok
                }
            }
            KvCall::Delete { key } => {
                if self.ephemeral.remove(key).is_some() || self.counters.remove(key).is_some() {
                    KvResult::Deleted
                } else {
                    KvResult::NotFound
                }
            }
            KvCall::ExpireSession { session } => {
                if self.sessions.remove(session) {
                    let before = self.ephemeral.len();
                    self.ephemeral.retain(|_, s| s != session);
                    KvResult::Expired { deleted: before - self.ephemeral.len() }
                } else {
                    KvResult::NotFound
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Completed operations that could be linearized before the search got
    /// stuck, at the deepest point reached.
    pub linearized: usize,
    pub total: usize,
    /// Operations that were candidates at the deepest point, none of which
    /// could be placed next.
    pub stuck_on: Vec<String>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no linearization: stuck after {}/{} ops at [{}]", self.linearized, self.total, self.stuck_on.join(", "))
    }
}

fn render(op: &HistoryOp) -> String {
    match &op.returned {
        Some((t, r)) => format!("c{} {} @{:?}..{:?} = {:?}", op.client, op.call, op.invoked, t, r),
        None => format!("c{} {} @{:?}..? = ?", op.client, op.call, op.invoked),
    }
}

struct Bits(Vec<u64>);

impl Bits {
    fn get(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }
    fn flip(&mut self, i: usize) {
        self.0[i / 64] ^= 1 << (i % 64);
    }
}

pub fn check(initial: &Model, history: &[HistoryOp]) -> Result<(), Violation> {
    let mut ops: Vec<&HistoryOp> = history.iter().collect();
    ops.sort_by_key(|o| (o.invoked, o.returned.as_ref().map(|(t, _)| *t)));
    let n = ops.len();
    let completed_total = ops.iter().filter(|o| o.returned.is_some()).count();
    let ret = |i: usize| ops[i].returned.as_ref().map_or(Duration::MAX, |(t, _)| *t);

    let mut done = Bits(vec![0; n.div_ceil(64).max(1)]);
    let mut model = initial.clone();
    let mut completed = 0usize;
    // (op placed, model before it)
    let mut stack: Vec<(usize, Model)> = Vec::new();
    let mut memo: HashSet<(Vec<u64>, Model)> = HashSet::new();
    let mut resume_after: Option<usize> = None;
    let mut deepest = (0usize, Vec::new());

    loop {
        if completed == completed_total {
            return Ok(());
        }
        // an op may go next only if it was invoked before every pending
        // completed op returned
        let horizon = (0..n).filter(|&i| !done.get(i) && ops[i].returned.is_some()).map(ret).min().unwrap_or(Duration::MAX);
        let start = resume_after.map_or(0, |i| i + 1);
        resume_after = None;
        let mut placed = false;
        for i in start..n {
            if ops[i].invoked > horizon {
                break;
            }
            if done.get(i) {
                continue;
            }
            let mut next = model.clone();
            let got = next.step(&ops[i].call);
            if ops[i].returned.as_ref().is_some_and(|(_, want)| *want != got) {
                continue;
            }
            done.flip(i);
            if !memo.insert((done.0.clone(), next.clone())) {
                done.flip(i);
                continue;
            }
            stack.push((i, std::mem::replace(&mut model, next)));
            if ops[i].returned.is_some() {
                completed += 1;
            }
            placed = true;
            break;
        }
        if placed {
            continue;
        }
        if completed > deepest.0 || deepest.1.is_empty() {
            let stuck: Vec<String> = (0..n)
                .filter(|&i| !done.get(i) && ops[i].invoked <= horizon)
                .map(|i| render(ops[i]))
                .collect();
            deepest = (completed, stuck);
        }
        let Some((i, before)) = stack.pop() else {
            return Err(Violation { linearized: deepest.0, total: completed_total, stuck_on: deepest.1 });
        };
        done.flip(i);
        if ops[i].returned.is_some() {
            completed -= 1;
        }
        model = before;
        resume_after = Some(i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(t: u64) -> Duration {
        Duration::from_millis(t)
    }

    fn op(client: usize, call: KvCall, a: u64, b: Option<(u64, KvResult)>) -> HistoryOp {
        HistoryOp { client, call, invoked: ms(a), returned: b.map(|(t, r)| (ms(t), r)) }
    }

    fn create(key: &str, s: u64) -> KvCall {
        KvCall::CreateEphemeral { key: key.into(), session: SessionId(s) }
    }

    fn cas(expected: u64, new: u64) -> KvCall {
        KvCall::Cas { key: "c".into(), expected, new }
    }

    fn init() -> Model {
        Model::with_sessions([SessionId(1), SessionId(2)])
    }

    #[test]
    fn concurrent_creates_one_winner() {
        let h = [
            op(0, create("k", 1), 0, Some((10, KvResult::AlreadyExists))),
            op(1, create("k", 2), 1, Some((9, KvResult::Created))),
        ];
        assert!(check(&init(), &h).is_ok());
    }

    #[test]
    fn two_winners_rejected() {
        let h = [
            op(0, create("k", 1), 0, Some((10, KvResult::Created))),
            op(1, create("k", 2), 1, Some((9, KvResult::Created))),
        ];
        assert!(check(&init(), &h).is_err());
    }

    #[test]
    fn real_time_order_is_respected() {
        // the cas returned before the read-like conflict was invoked, so
        // the conflict must observe the new value
        let h = [op(0, cas(0, 5), 0, Some((5, KvResult::Ok))), op(1, cas(0, 1), 6, Some((8, KvResult::Conflict(0))))];
        assert!(check(&init(), &h).is_err());
        let ok = [op(0, cas(0, 5), 0, Some((5, KvResult::Ok))), op(1, cas(0, 1), 6, Some((8, KvResult::Conflict(5))))];
        assert!(check(&init(), &ok).is_ok());
    }

    #[test]
    fn pending_op_may_or_may_not_apply() {
        let applied = [op(0, cas(0, 3), 0, None), op(1, cas(0, 1), 10, Some((12, KvResult::Conflict(3))))];
        assert!(check(&init(), &applied).is_ok());
        let skipped = [op(0, cas(0, 3), 0, None), op(1, cas(0, 1), 10, Some((12, KvResult::Ok)))];
        assert!(check(&init(), &skipped).is_ok());
        let impossible = [op(0, cas(0, 3), 0, None), op(1, cas(0, 1), 10, Some((12, KvResult::Conflict(7))))];
        assert!(check(&init(), &impossible).is_err());
    }

    #[test]
    fn expiry_removes_the_sessions_entries() {
        let h = [
            op(0, create("k", 1), 0, Some((2, KvResult::Created))),
            op(1, KvCall::ExpireSession { session: SessionId(1) }, 3, Some((5, KvResult::Expired { deleted: 1 }))),
            op(0, create("k", 2), 6, Some((8, KvResult::Created))),
            op(0, create("j", 1), 9, Some((10, KvResult::SessionExpired))),
        ];
        assert!(check(&init(), &h).is_ok());
        let stale = [
            op(0, create("k", 1), 0, Some((2, KvResult::Created))),
            op(1, KvCall::ExpireSession { session: SessionId(1) }, 3, Some((5, KvResult::Expired { deleted: 1 }))),
            op(0, create("k", 2), 6, Some((8, KvResult::AlreadyExists))),
        ];
        assert!(check(&init(), &stale).is_err());
    }

    #[test]
    fn long_sequential_history_is_fast() {
        let mut h = Vec::new();
        for i in 0..2000u64 {
            h.push(op((i % 4) as usize, cas(i, i + 1), 10 * i, Some((10 * i + 5, KvResult::Ok))));
        }
        assert!(check(&init(), &h).is_ok());
    }
}
