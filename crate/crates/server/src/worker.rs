use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError};
use migrant_core::engine::{keep_latest, WorkerInput, WorkerOutput, WorkerShard};
use migrant_core::wire::{CloseReason, Frame, Role};
use migrant_core::ConnectionId;

use crate::{close_frame, ClusterMsg, ConnHandle, Outbound, Shared, WorkerMsg};

/// Most inbound messages handled between two timer polls.
const BURST: usize = 1024;
const IDLE_WAIT: Duration = Duration::from_millis(200);

struct Worker {
    shared: Arc<Shared>,
    shard: WorkerShard,
    handles: HashMap<ConnectionId, ConnHandle>,
    out: Vec<WorkerOutput>,
}

pub(crate) fn run(index: usize, shared: Arc<Shared>, rx: Receiver<WorkerMsg>) {
    let e = &shared.cfg.engine;
    let mut shard = WorkerShard::new(index as u32, shared.cfg.node_id, shared.cache.clone(), e.batch);
    if let Some(policy) = e.conflation {
        shard = shard.with_conflation(policy, keep_latest());
    }
    let mut w = Worker { shared, shard, handles: HashMap::new(), out: Vec::new() };
    loop {
        let now = w.shared.clock.now();
        let wait = w.shard.next_deadline().map_or(IDLE_WAIT, |d| d.saturating_sub(now).min(IDLE_WAIT));
        let first = match rx.recv_timeout(wait) {
            Ok(m) => Some(m),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        let now = w.shared.clock.now();
        for msg in first.into_iter().chain(rx.try_iter().take(BURST)) {
            if !w.on_msg(now, msg) {
                return;
            }
        }
        w.shard.poll_timers(now, &mut w.out);
        w.route(now);
    }
}

impl Worker {
    /// Returns false once told to stop.
    fn on_msg(&mut self, now: Duration, msg: WorkerMsg) -> bool {
        match msg {
            WorkerMsg::Attach { conn, address, handle } => {
                self.handles.insert(conn, handle);
                self.shard.handle(now, WorkerInput::Attach { conn, address }, &mut self.out);
            }
            WorkerMsg::Input(WorkerInput::Frame { conn, frame: Frame::Connect { role: Role::Client, .. } })
                if !self.shared.accepting.load(Ordering::Acquire) =>
            {
                if let Some(h) = self.handles.remove(&conn) {
                    let _ = h.tx.send(Outbound::Bytes(close_frame(CloseReason::Unavailable)));
                    let _ = h.tx.send(Outbound::Close);
                }
                self.shared.counters.refused.fetch_add(1, Ordering::Relaxed);
                self.shard.handle(now, WorkerInput::Closed { conn }, &mut self.out);
            }
            WorkerMsg::Input(WorkerInput::Closed { conn }) => {
                self.handles.remove(&conn);
                self.shard.handle(now, WorkerInput::Closed { conn }, &mut self.out);
            }
            WorkerMsg::Input(input) => self.shard.handle(now, input, &mut self.out),
            WorkerMsg::Stop => {
                self.shard.handle(now, WorkerInput::CloseAll { reason: CloseReason::Shutdown }, &mut self.out);
                self.route(now);
                return false;
            }
        }
        self.route(now);
        true
    }

    fn route(&mut self, now: Duration) {
        // before any write leaves, so that whoever sees a write's effect
        // also sees it counted
        self.publish_stats();
        let mut slow = Vec::new();
        for o in self.out.drain(..) {
            match o {
                WorkerOutput::Write { conn, bytes } => {
                    let Some(h) = self.handles.get(&conn) else { continue };
                    if !h.budget.try_reserve(bytes.len()) {
                        slow.push(conn);
                        continue;
                    }
                    if h.tx.send(Outbound::Bytes(bytes)).is_err() {
                        self.handles.remove(&conn);
                    }
                }
                WorkerOutput::Close { conn, .. } => {
                    if let Some(h) = self.handles.remove(&conn) {
                        let _ = h.tx.send(Outbound::Close);
                    }
                }
                WorkerOutput::Publish(req) => {
                    let _ = self.shared.cluster.send(ClusterMsg::Publish(req));
                }
            }
        }
        for conn in slow {
            // the queue is full, so the CLOSE frame cannot be queued either
            if let Some(h) = self.handles.remove(&conn) {
                let _ = h.tx.send(Outbound::Close);
                self.shared.counters.slow_consumers.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(%conn, queued = h.budget.queued(), "slow consumer dropped");
            }
            self.shard.handle(now, WorkerInput::Closed { conn }, &mut self.out);
        }
        // detaching emits nothing, but keep the queue empty regardless
        if !self.out.is_empty() {
            self.route(now);
        }
    }

    fn publish_stats(&self) {
        *self.shared.worker_stats[self.shard.index() as usize].lock() = (self.shard.stats(), self.shard.connections());
    }
}
