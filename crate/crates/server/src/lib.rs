//! The migrant broker runtime.
//!
//! Threads:
//!
//! - one accept task on the caller's tokio runtime, which reads the first
//!   frame of every connection to tell clients from peers;
//! - `io_threads` I/O shards, each a single-threaded tokio runtime owning
//!   its sockets, decoding frames and writing queued bytes;
//! - `workers` worker threads, each owning a [`WorkerShard`];
//! - one cluster thread owning the [`ServerNode`];
//! - one dialer task per remote peer.
//!
//! Threads talk over channels only. The topic cache is shared.
//!
//! [`WorkerShard`]: migrant_core::engine::WorkerShard
//! [`ServerNode`]: migrant_core::cluster::ServerNode

pub mod admin;
mod cluster;
pub mod config;
mod io;
mod peer;
mod worker;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use bytes::Bytes;
use crossbeam_channel::Sender;
use migrant_core::cluster::NodeStatus;
use migrant_core::engine::{Acceptor, OutboundBudget, PublishRequest, TopicCache, WorkerInput, WorkerStats};
use migrant_core::wire::{CloseReason, Frame, Publish};
use migrant_core::{ConnectionId, ServerId};
use parking_lot::Mutex;
use serde::Serialize;
use tokio::net::{TcpListener, TcpSocket};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle as TaskHandle;

pub use config::{ConfigError, ServerConfig};

/// Monotonic time since server start, the clock of every state machine.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Clock(Instant);

impl Clock {
    pub(crate) fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

/// What a worker asks an I/O task to do.
#[derive(Debug)]
pub(crate) enum Outbound {
    Bytes(Bytes),
    /// Flush what is queued, then close.
    Close,
}

#[derive(Debug, Clone)]
pub(crate) struct ConnHandle {
    pub tx: mpsc::UnboundedSender<Outbound>,
    pub budget: Arc<OutboundBudget>,
}

pub(crate) enum WorkerMsg {
    Attach { conn: ConnectionId, address: String, handle: ConnHandle },
    Input(WorkerInput),
    Stop,
}

pub(crate) enum ClusterMsg {
    Publish(PublishRequest),
    Peer { from: ServerId, frame: Frame },
    LocalPublish { publish: Publish, reply: oneshot::Sender<Frame> },
    Status(oneshot::Sender<NodeStatus>),
    Stop,
}

#[derive(Debug, Default)]
pub(crate) struct Counters {
    pub accepted: AtomicU64,
    pub refused: AtomicU64,
    pub slow_consumers: AtomicU64,
    pub peer_frames_in: AtomicU64,
    pub peer_frames_out: AtomicU64,
    pub fenced: AtomicU64,
}

pub(crate) struct Shared {
    pub cfg: ServerConfig,
    pub clock: Clock,
    /// Mirrors the node's readiness; workers refuse CONNECT while false.
    pub accepting: AtomicBool,
    pub cache: Arc<TopicCache>,
    pub acceptor: Acceptor,
    pub workers: Vec<Sender<WorkerMsg>>,
    pub cluster: Sender<ClusterMsg>,
    pub worker_stats: Vec<Mutex<(WorkerStats, usize)>>,
    pub counters: Counters,
}

/// Counters exposed by `GET /stats`.
#[derive(Debug, Clone, Default, Serialize, serde::Deserialize, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub node_id: u16,
    pub uptime_ms: u64,
    pub accepting_clients: bool,
    pub connections: usize,
    pub accepted_total: u64,
    pub refused_total: u64,
    pub slow_consumers: u64,
    pub notifications: u64,
    pub writes: u64,
    pub bytes_out: u64,
    pub publishes: u64,
    pub violations: u64,
    pub peer_frames_in: u64,
    pub peer_frames_out: u64,
    pub fenced: u64,
    pub cached_messages: usize,
}

impl Shared {
    pub(crate) fn stats(&self) -> StatsSnapshot {
        let c = &self.counters;
        let mut s = StatsSnapshot {
            node_id: self.cfg.node_id.0,
            uptime_ms: self.clock.now().as_millis() as u64,
            accepting_clients: self.accepting.load(Ordering::Acquire),
            connections: 0,
            accepted_total: c.accepted.load(Ordering::Relaxed),
            refused_total: c.refused.load(Ordering::Relaxed),
            slow_consumers: c.slow_consumers.load(Ordering::Relaxed),
            peer_frames_in: c.peer_frames_in.load(Ordering::Relaxed),
            peer_frames_out: c.peer_frames_out.load(Ordering::Relaxed),
            fenced: c.fenced.load(Ordering::Relaxed),
            cached_messages: self.cache.total_messages(),
            ..StatsSnapshot::default()
        };
        for w in &self.worker_stats {
            let (ws, conns) = *w.lock();
            s.connections += conns;
            s.notifications += ws.notifications;
            s.writes += ws.writes;
            s.bytes_out += ws.bytes_out;
            s.publishes += ws.publishes;
            s.violations += ws.violations;
        }
        s
    }
}

/// Start-up options that are not part of the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct StartOptions {
    /// Rebuild the cache from peers before serving: set when restarting a
    /// member of a running cluster.
    pub rejoin: bool,
}

/// A started server. Dropping it without [`RunningServer::shutdown`]
/// leaves the threads running until the process exits.
pub struct RunningServer {
    shared: Arc<Shared>,
    local_addr: SocketAddr,
    admin_addr: Option<SocketAddr>,
    threads: Vec<JoinHandle<()>>,
    tasks: Vec<TaskHandle<()>>,
    io_threads: Vec<JoinHandle<()>>,
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn admin_addr(&self) -> Option<SocketAddr> {
        self.admin_addr
    }

    pub fn id(&self) -> ServerId {
        self.shared.cfg.node_id
    }

    pub fn accepting_clients(&self) -> bool {
        self.shared.accepting.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.shared.stats()
    }

    pub async fn status(&self) -> Option<NodeStatus> {
        let (tx, rx) = oneshot::channel();
        self.shared.cluster.send(ClusterMsg::Status(tx)).ok()?;
        rx.await.ok()
    }

    /// Waits until the node accepts clients.
    pub async fn ready(&self, limit: Duration) -> Result<()> {
        let deadline = tokio::time::Instant::now() + limit;
        while !self.accepting_clients() {
            if tokio::time::Instant::now() >= deadline {
                anyhow::bail!("{} not ready after {:?}", self.id(), limit);
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        Ok(())
    }

    /// Closes every client with SHUTDOWN and stops all threads.
    pub async fn shutdown(self) {
        for t in &self.tasks {
            t.abort();
        }
        for w in &self.shared.workers {
            let _ = w.send(WorkerMsg::Stop);
        }
        let _ = self.shared.cluster.send(ClusterMsg::Stop);
        let threads = self.threads;
        let io_threads = self.io_threads;
        let tasks = self.tasks;
        let _ = tokio::task::spawn_blocking(move || {
            for t in threads {
                let _ = t.join();
            }
        })
        .await;
        for t in tasks {
            let _ = t.await;
        }
        // the I/O shards stop once the accept task dropped their queues;
        // give open sockets a moment to flush the CLOSE frames
        let _ = tokio::task::spawn_blocking(move || {
            for t in io_threads {
                let _ = t.join();
            }
        })
        .await;
    }
}

/// Listen backlog; connection storms from many clients must not overflow it.
const BACKLOG: u32 = 4096;

fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    let socket = if addr.is_ipv4() { TcpSocket::new_v4()? } else { TcpSocket::new_v6()? };
    socket.set_reuseaddr(true)?;
    socket.bind(addr)?;
    socket.listen(BACKLOG)
}

/// Binds the listeners and starts every thread. Must be called from within
/// a tokio runtime, which then hosts the accept, peer and admin tasks.
pub async fn start(cfg: ServerConfig, opts: StartOptions) -> Result<RunningServer> {
    cfg.validate()?;
    let listener = bind(cfg.listen_address).with_context(|| format!("binding {}", cfg.listen_address))?;
    let local_addr = listener.local_addr()?;
    let admin_listener = match cfg.admin_address {
        Some(a) => Some(TcpListener::bind(a).await.with_context(|| format!("binding admin {a}"))?),
        None => None,
    };
    let admin_addr = admin_listener.as_ref().map(|l| l.local_addr()).transpose()?;

    let e = &cfg.engine;
    let cache = Arc::new(TopicCache::new(e.num_groups, e.cache_depth));
    let (worker_txs, worker_rxs): (Vec<_>, Vec<_>) = (0..e.workers).map(|_| crossbeam_channel::unbounded()).unzip();
    let (cluster_tx, cluster_rx) = crossbeam_channel::unbounded();
    let shared = Arc::new(Shared {
        clock: Clock(Instant::now()),
        accepting: AtomicBool::new(false),
        cache,
        acceptor: Acceptor::new(e.io_threads, e.workers, e.max_connections),
        workers: worker_txs,
        cluster: cluster_tx,
        worker_stats: (0..e.workers).map(|_| Mutex::new((WorkerStats::default(), 0))).collect(),
        counters: Counters::default(),
        cfg,
    });

    let mut threads = Vec::new();
    for (i, rx) in worker_rxs.into_iter().enumerate() {
        let s = shared.clone();
        threads.push(
            std::thread::Builder::new()
                .name(format!("worker-{i}"))
                .spawn(move || worker::run(i, s, rx))?,
        );
    }

    let mut tasks = Vec::new();
    let mut links = std::collections::HashMap::new();
    for (id, addr) in shared.cfg.remote_peers() {
        let (tx, rx) = mpsc::unbounded_channel();
        links.insert(id, tx);
        tasks.push(tokio::spawn(peer::dial(shared.clone(), id, addr, rx)));
    }
    {
        let s = shared.clone();
        threads.push(
            std::thread::Builder::new()
                .name("cluster".into())
                .spawn(move || cluster::run(s, cluster_rx, links, opts.rejoin))?,
        );
    }

    let mut io_txs = Vec::new();
    let mut io_threads = Vec::new();
    for i in 0..shared.cfg.engine.io_threads {
        let (tx, rx) = mpsc::unbounded_channel();
        io_txs.push(tx);
        let s = shared.clone();
        io_threads.push(std::thread::Builder::new().name(format!("io-{i}")).spawn(move || io::run_shard(s, rx))?);
    }
    tasks.push(tokio::spawn(io::accept_loop(listener, shared.clone(), io_txs)));
    if let Some(l) = admin_listener {
        let app = admin::router(shared.clone());
        tasks.push(tokio::spawn(async move {
            if let Err(e) = axum::serve(l, app).await {
                tracing::warn!("admin server stopped: {e}");
            }
        }));
    }
    tracing::info!(node = %shared.cfg.node_id, %local_addr, ?admin_addr, "server started");
    Ok(RunningServer { shared, local_addr, admin_addr, threads, tasks, io_threads })
}

/// Sends a CLOSE frame on a raw handle; used before the worker knows the
/// connection.
pub(crate) fn close_frame(reason: CloseReason) -> Bytes {
    migrant_core::wire::encode_frame(&Frame::Close { reason }).expect("close frame encodes")
}
