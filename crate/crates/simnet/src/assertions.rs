//! Trace assertions. Each is a pure function of the trace entries plus, for
//! end-of-run checks, the final cache snapshots.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use migrant_core::{ConnectionId, GroupId, MsgId, OrderKey, ServerId, TopicName};

use crate::scenario::{AssertionKind, FaultScript, Workload};
use crate::trace::{ClientIdx, TraceEntry, TraceEvent};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// Not yet satisfied; may still be by the end of the run.
    Pending(String),
    Fail(String),
}

impl Verdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail(_))
    }
}

/// Whether violations only ever grow with the trace, so that a minimal
/// failing prefix is meaningful.
pub fn is_safety(kind: AssertionKind) -> bool {
    matches!(kind, AssertionKind::TotalOrder | AssertionKind::CoordinatorUnique | AssertionKind::TwoCopy)
}

/// Inputs an assertion may look at besides the trace.
pub struct Context<'a> {
    pub workload: &'a Workload,
    pub faults: &'a FaultScript,
    pub servers: usize,
    /// Cache snapshots of live servers at the end of the run.
    pub caches: &'a [(ServerId, BTreeMap<TopicName, Vec<OrderKey>>)],
    /// Upper bound on the time a minority server may take to fence.
    pub fence_deadline: Duration,
}

pub fn check(kind: AssertionKind, trace: &[TraceEntry], ctx: &Context<'_>) -> Verdict {
    match kind {
        AssertionKind::TotalOrder => total_order(trace),
        AssertionKind::AtLeastOnce => at_least_once(trace, ctx),
        AssertionKind::CoordinatorUnique => coordinator_unique(trace),
        AssertionKind::TwoCopy => two_copy(trace, ctx.servers),
        AssertionKind::Fencing => fencing(trace, ctx),
        AssertionKind::CacheEquality => cache_equality(ctx),
        AssertionKind::Reconcile => reconcile(trace),
        AssertionKind::Rebuild => rebuild(trace, ctx),
    }
}

pub fn total_order(trace: &[TraceEntry]) -> Verdict {
    let mut last: BTreeMap<(ClientIdx, usize), OrderKey> = BTreeMap::new();
    let mut payloads: BTreeMap<(usize, OrderKey), (u64, ClientIdx)> = BTreeMap::new();
    for e in trace {
        if let TraceEvent::Delivered { client, topic, key, payload, .. } = e.event {
            if let Some(prev) = last.insert((client, topic), key) {
                if key <= prev {
                    return Verdict::Fail(format!(
                        "client {client} got topic {topic} key {key} after {prev} at {:?}",
                        e.at
                    ));
                }
            }
            match payloads.get(&(topic, key)) {
                Some((p, other)) if *p != payload => {
                    return Verdict::Fail(format!(
                        "topic {topic} key {key}: clients {other} and {client} saw different payloads"
                    ));
                }
                Some(_) => {}
                None => {
                    payloads.insert((topic, key), (payload, client));
                }
            }
        }
    }
    Verdict::Pass
}

pub fn at_least_once(trace: &[TraceEntry], ctx: &Context<'_>) -> Verdict {
    let w = ctx.workload;
    let mut topic_of: BTreeMap<MsgId, usize> = BTreeMap::new();
    let mut in_flight: BTreeSet<MsgId> = BTreeSet::new();
    let mut acked: Vec<MsgId> = Vec::new();
    let mut seen: BTreeMap<(ClientIdx, MsgId), u32> = BTreeMap::new();
    for e in trace {
        match e.event {
            TraceEvent::Published { msg_id, topic, ack, .. } => {
                topic_of.insert(msg_id, topic);
                if ack {
                    in_flight.insert(msg_id);
                }
            }
            TraceEvent::PubAcked { msg_id, .. } => {
                in_flight.remove(&msg_id);
                acked.push(msg_id);
            }
            TraceEvent::PubFailed { msg_id, .. } => {
                in_flight.remove(&msg_id);
            }
            TraceEvent::Delivered { client, msg_id, .. } => {
                let n = seen.entry((client, msg_id)).or_default();
                *n += 1;
                if *n > 1 {
                    return Verdict::Fail(format!("client {client} got {msg_id:?} twice at {:?}", e.at));
                }
            }
            _ => {}
        }
    }
    let subs: Vec<(ClientIdx, BTreeSet<usize>)> =
        (0..w.subscribers).map(|s| (w.publishers + s, w.topics_of(s).into_iter().collect())).collect();
    let mut missing = 0usize;
    let mut example = None;
    for id in &acked {
        let topic = topic_of[id];
        for (client, topics) in &subs {
            if topics.contains(&topic) && !seen.contains_key(&(*client, *id)) {
                missing += 1;
                example.get_or_insert((*client, *id));
            }
        }
    }
    if missing > 0 {
        let (c, id) = example.expect("set with missing");
        return Verdict::Pending(format!("{missing} deliveries of acked messages outstanding, e.g. {id:?} to client {c}"));
    }
    if !in_flight.is_empty() {
        return Verdict::Pending(format!("{} publications awaiting an answer", in_flight.len()));
    }
    Verdict::Pass
}

pub fn coordinator_unique(trace: &[TraceEntry]) -> Verdict {
    let mut won: BTreeMap<(GroupId, u64), ServerId> = BTreeMap::new();
    let mut last_epoch: BTreeMap<GroupId, u64> = BTreeMap::new();
    let mut assigners: BTreeMap<(GroupId, u64), ServerId> = BTreeMap::new();
    for e in trace {
        match &e.event {
            TraceEvent::Won { server, group, epoch } => {
                if let Some(other) = won.insert((*group, *epoch), *server) {
                    return Verdict::Fail(format!("{group} epoch {epoch} won by {other} and {server}"));
                }
                if let Some(prev) = last_epoch.insert(*group, *epoch) {
                    if *epoch <= prev {
                        return Verdict::Fail(format!("{group} epoch went from {prev} to {epoch}"));
                    }
                }
            }
            TraceEvent::Assigned { server, group, epoch, .. } => {
                if let Some(other) = assigners.insert((*group, *epoch), *server) {
                    if other != *server {
                        return Verdict::Fail(format!("{group} epoch {epoch} sequenced by {other} and {server}"));
                    }
                }
            }
            TraceEvent::OwnerConflict { group, owners } => {
                return Verdict::Fail(format!("{group} owned by {owners:?} at {:?}", e.at));
            }
            _ => {}
        }
    }
    Verdict::Pass
}

pub fn two_copy(trace: &[TraceEntry], servers: usize) -> Verdict {
    let need = servers.min(2);
    for e in trace {
        if let TraceEvent::AckEmitted { server, topic, key, copies } = e.event {
            if copies < need {
                return Verdict::Fail(format!(
                    "{server} acked topic {topic} key {key} with {copies} cached copies at {:?}",
                    e.at
                ));
            }
        }
    }
    Verdict::Pass
}

pub fn fencing(trace: &[TraceEntry], ctx: &Context<'_>) -> Verdict {
    let isolations = ctx.faults.isolations();
    let isolated: BTreeSet<ServerId> = isolations.iter().map(|(s, _, _)| ServerId(*s as u16 + 1)).collect();
    for e in trace {
        if let TraceEvent::Fenced { server } = e.event {
            if !isolated.contains(&server) {
                return Verdict::Fail(format!("majority-side {server} fenced at {:?}", e.at));
            }
        }
    }
    for (s, start, heal) in isolations {
        let id = ServerId(s as u16 + 1);
        let deadline = start + ctx.fence_deadline;
        if heal.is_some_and(|h| h < deadline) {
            continue;
        }
        let mut open: BTreeSet<ConnectionId> = BTreeSet::new();
        let mut fenced_at = None;
        for e in trace.iter().take_while(|e| e.at <= deadline) {
            match e.event {
                TraceEvent::ConnAttached { server, conn, .. } if server == id && e.at <= start => {
                    open.insert(conn);
                }
                TraceEvent::ConnClosedByServer { server, conn } | TraceEvent::ConnClosedByClient { server, conn }
                    if server == id =>
                {
                    open.remove(&conn);
                }
                TraceEvent::Fenced { server } if server == id && e.at >= start && fenced_at.is_none() => {
                    fenced_at = Some(e.at);
                }
                _ => {}
            }
        }
        if fenced_at.is_none() {
            return Verdict::Fail(format!("{id} did not fence within {:?} of isolation at {start:?}", ctx.fence_deadline));
        }
        if !open.is_empty() {
            return Verdict::Fail(format!("{id} kept {} connections open past {deadline:?}", open.len()));
        }
    }
    Verdict::Pass
}

pub fn cache_equality(ctx: &Context<'_>) -> Verdict {
    let Some((first_id, first)) = ctx.caches.first() else { return Verdict::Pass };
    for (id, snap) in &ctx.caches[1..] {
        if snap != first {
            let topic = first
                .keys()
                .chain(snap.keys())
                .find(|t| first.get(*t) != snap.get(*t))
                .map(|t| t.to_string())
                .unwrap_or_default();
            return Verdict::Pending(format!("caches of {first_id} and {id} differ on `{topic}`"));
        }
    }
    Verdict::Pass
}

pub fn reconcile(trace: &[TraceEntry]) -> Verdict {
    let gap = trace.iter().position(|e| matches!(e.event, TraceEvent::GapDetected { .. }));
    let Some(i) = gap else { return Verdict::Pending("no gap detected yet".into()) };
    let TraceEvent::GapDetected { server, group } = trace[i].event else { unreachable!() };
    let repaired = trace[i..].iter().any(|e| {
        matches!(e.event, TraceEvent::RoundFinished { server: s, group: g, .. } if s == server && g == group)
    });
    if repaired {
        Verdict::Pass
    } else {
        Verdict::Pending(format!("{server} has not finished reconciling {group}"))
    }
}

pub fn rebuild(trace: &[TraceEntry], ctx: &Context<'_>) -> Verdict {
    use crate::scenario::Fault;
    for (at, f) in &ctx.faults.events {
        let Fault::Restart(s) = f else { continue };
        let id = ServerId(*s as u16 + 1);
        let mut rebuilding = false;
        let mut ready = false;
        for e in trace.iter().filter(|e| e.at >= *at) {
            match e.event {
                TraceEvent::Rebuilding { server } if server == id => rebuilding = true,
                TraceEvent::Ready { server } if server == id => {
                    ready = true;
                    break;
                }
                TraceEvent::ClientConnected { client, server } if server == id => {
                    return Verdict::Fail(format!("client {client} admitted by {id} at {:?} before it was ready", e.at));
                }
                _ => {}
            }
        }
        if !rebuilding {
            return Verdict::Pending(format!("{id} has not started rebuilding"));
        }
        if !ready {
            return Verdict::Pending(format!("{id} has not finished rebuilding"));
        }
    }
    Verdict::Pass
}
