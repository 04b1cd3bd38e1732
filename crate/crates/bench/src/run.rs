//! Benchpub and Benchsub drivers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Result};
use migrant_client::{AdminClient, Client, ClientConfig, Event, Published, ServerList, ServerStats};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinSet;
use tokio::time::Instant;

use crate::audit::{audit, AuditReport, PubRecord, SubRecord};
use crate::cpu::CpuSampler;
use crate::payload::{self, wall_nanos};
use crate::stats::{stats, LatencyStats};

/// Connections per server, as seen by the clients.
#[derive(Debug, Default)]
struct Counts(Mutex<BTreeMap<String, i64>>);

impl Counts {
    fn add(&self, server: &str, delta: i64) {
        *self.0.lock().unwrap_or_else(|e| e.into_inner()).entry(server.to_string()).or_default() += delta;
    }

    fn snapshot(&self) -> BTreeMap<String, i64> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

pub fn topic_name(prefix: &str, i: usize) -> String {
    format!("{prefix}{i}")
}

#[derive(Debug, Clone)]
pub struct PubConfig {
    pub servers: ServerList,
    pub topics: usize,
    /// Messages per second per topic.
    pub rate: f64,
    pub payload: usize,
    pub duration: Duration,
    pub prefix: String,
    /// Time allowed for outstanding acknowledgements after the last send.
    pub ack_grace: Duration,
    pub seed: u64,
}

impl PubConfig {
    pub fn new(servers: ServerList) -> Self {
        Self {
            servers,
            topics: 100,
            rate: 1.0,
            payload: payload::DEFAULT_SIZE,
            duration: Duration::from_secs(60),
            prefix: "bench/".into(),
            ack_grace: Duration::from_secs(20),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PubReport {
    pub sent: u64,
    pub acked: u64,
    pub failed: u64,
    /// Sends without an outcome when the grace period ran out.
    pub unresolved: u64,
    pub elapsed_s: f64,
    /// Aggregate sends per second.
    pub rate: f64,
    #[serde(skip)]
    pub log: Vec<PubRecord>,
}

/// Publishes to `topics` topics round-robin, `rate` messages per second
/// each, over one connection, each publication acknowledged.
pub async fn run_pub(cfg: PubConfig) -> Result<PubReport> {
    if cfg.topics == 0 || !(cfg.rate.is_finite() && cfg.rate > 0.0) {
        bail!("need at least one topic and a positive rate");
    }
    let mut client_cfg = ClientConfig::new(cfg.servers.clone());
    client_cfg.seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(7);
    let mut client = Client::connect(client_cfg);
    let connected = tokio::time::timeout(Duration::from_secs(15), async {
        loop {
            match client.next_event().await {
                Some(Event::Connected { .. }) => return true,
                Some(_) => {}
                None => return false,
            }
        }
    })
    .await;
    if !matches!(connected, Ok(true)) {
        bail!("publisher could not connect to {:?}", cfg.servers.entries());
    }
    let (handle, mut events) = client.split();
    let drain = tokio::spawn(async move { while events.recv().await.is_some() {} });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let interval = Duration::from_secs_f64(1.0 / (cfg.rate * cfg.topics as f64));
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
    let start = Instant::now();
    let stop = start + cfg.duration;
    let mut inflight = JoinSet::new();
    let mut report = PubReport::default();
    let mut i = 0usize;
    loop {
        ticker.tick().await;
        if Instant::now() >= stop {
            break;
        }
        let topic = topic_name(&cfg.prefix, i % cfg.topics);
        i += 1;
        let sent_at = wall_nanos();
        let body = payload::encode(sent_at, cfg.payload, &mut rng);
        let fut = handle.publish_queued(&topic, body, true)?;
        report.sent += 1;
        inflight.spawn(async move { (topic, sent_at, fut.await) });
        while let Some(r) = inflight.try_join_next() {
            settle(r, &mut report);
        }
    }
    report.elapsed_s = start.elapsed().as_secs_f64();
    report.rate = report.sent as f64 / cfg.duration.as_secs_f64();
    let grace_end = Instant::now() + cfg.ack_grace;
    while !inflight.is_empty() {
        match tokio::time::timeout_at(grace_end, inflight.join_next()).await {
            Ok(Some(r)) => settle(r, &mut report),
            Ok(None) => break,
            Err(_) => break,
        }
    }
    report.unresolved = inflight.len() as u64;
    inflight.abort_all();
    handle.close().await;
    drain.abort();
    report.log.sort_by_key(|r| r.sent_at);
    Ok(report)
}

type Outcome = (String, u64, Result<Published, migrant_client::Error>);

fn settle(r: Result<Outcome, tokio::task::JoinError>, report: &mut PubReport) {
    let Ok((topic, sent_at, outcome)) = r else { return };
    match outcome {
        Ok(p) => {
            report.acked += 1;
            if let Some(key) = p.key {
                report.log.push(PubRecord { topic, key, sent_at });
            }
        }
        Err(_) => report.failed += 1,
    }
}

/// A combined run: `connections` subscribers, each on one random topic,
/// and optionally a co-located publisher feeding every topic.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub servers: ServerList,
    pub connections: usize,
    pub topics: usize,
    /// Messages per second per topic; zero runs subscribers only.
    pub rate: f64,
    pub payload: usize,
    pub warmup: Duration,
    pub duration: Duration,
    /// Time after publishing stops during which deliveries still count
    /// for the audit.
    pub drain: Duration,
    /// New connections per second.
    pub ramp: usize,
    /// Share of connections that must come up for the run to go on.
    pub min_connected: f64,
    pub prefix: String,
    pub seed: u64,
    /// Broker processes to sample for CPU%.
    pub broker_pids: Vec<u32>,
    /// Admin API base URLs, for byte counters and final connection counts.
    pub admin: Vec<String>,
    /// Receives the wall-clock nanoseconds of time zero once subscribers
    /// are up, so callers can schedule faults against the run.
    pub started: Option<Arc<watch::Sender<Option<u64>>>>,
}

impl BenchConfig {
    pub fn new(servers: ServerList) -> Self {
        Self {
            servers,
            connections: 1000,
            topics: 100,
            rate: 1.0,
            payload: payload::DEFAULT_SIZE,
            warmup: Duration::from_secs(15),
            duration: Duration::from_secs(60),
            drain: Duration::from_secs(3),
            ramp: 2000,
            min_connected: 0.95,
            prefix: "bench/".into(),
            seed: 1,
            broker_pids: Vec::new(),
            admin: Vec::new(),
            started: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConnectionReport {
    pub requested: usize,
    pub connected: usize,
    pub reconnects: u64,
    /// Client-side view at the end of the run.
    pub per_server: BTreeMap<String, i64>,
}

/// The stable JSON report of a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub connections: ConnectionReport,
    pub topics: usize,
    pub rate_per_topic: f64,
    pub payload_bytes: usize,
    pub warmup_s: f64,
    pub duration_s: f64,
    pub published: Option<PubReport>,
    /// Notifications received inside the measurement window.
    pub received: u64,
    pub latency_ms: LatencyStats,
    /// Mean broker CPU% over the window, summed over brokers.
    pub cpu_percent: Option<f64>,
    /// Outgoing broker traffic over the window, summed over brokers.
    pub gbps: Option<f64>,
    pub audit: AuditReport,
    /// Broker counters at the end of the run, before subscribers leave.
    pub brokers: Vec<Option<ServerStats>>,
}

/// One latency sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    /// Receive time since the run's time zero (warm-up start).
    pub at: Duration,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchRun {
    pub report: BenchReport,
    /// Every sample from warm-up start to the end of the drain.
    pub samples: Vec<Sample>,
    /// Wall-clock nanoseconds of time zero.
    pub zero: u64,
    pub subscribers: Vec<SubRecord>,
    /// Wall-clock nanoseconds bounding the measurement window.
    pub window: (u64, u64),
}

impl BenchRun {
    /// Statistics of the samples received in `[from, until)`.
    pub fn window(&self, from: Duration, until: Duration) -> LatencyStats {
        let v: Vec<f64> = self.samples.iter().filter(|s| s.at >= from && s.at < until).map(|s| s.latency_ms).collect();
        stats(&v)
    }

    /// Replaces the audit with one against a publisher log from elsewhere.
    pub fn audit_against(&mut self, log: &[PubRecord]) {
        self.report.audit = audit(log, &self.subscribers, self.window.0, self.window.1, SETTLE);
    }
}

/// Deliveries to a subscriber that connected less than this before a send
/// are not required: its subscription may not have been in place yet.
const SETTLE: u64 = 1_000_000_000;

struct SubShared {
    counts: Counts,
    connected: AtomicUsize,
    reconnects: AtomicU64,
    samples: mpsc::UnboundedSender<(u64, f64)>,
}

async fn subscriber(mut client: Client, topic: String, shared: Arc<SubShared>, mut stop: watch::Receiver<bool>) -> SubRecord {
    let mut rec = SubRecord { topic, connected_at: None, keys: Vec::new() };
    let mut current: Option<String> = None;
    loop {
        tokio::select! {
            ev = client.next_event() => match ev {
                Some(Event::Message(m)) => {
                    let now = wall_nanos();
                    if let Some(l) = payload::latency_ms(&m.payload, now) {
                        let _ = shared.samples.send((now, l));
                    }
                    rec.keys.push(m.key);
                }
                Some(Event::Connected { address }) => {
                    if rec.connected_at.is_none() {
                        rec.connected_at = Some(wall_nanos());
                        shared.connected.fetch_add(1, Ordering::Relaxed);
                    } else {
                        shared.reconnects.fetch_add(1, Ordering::Relaxed);
                    }
                    shared.counts.add(&address, 1);
                    current = Some(address);
                }
                Some(Event::Disconnected { address }) => {
                    if current.take().is_some() {
                        shared.counts.add(&address, -1);
                    }
                }
                Some(Event::Truncated { .. }) => {}
                None => break,
            },
            _ = stop.changed() => break,
        }
    }
    client.close().await;
    rec
}

async fn broker_stats(admin: &[AdminClient]) -> Vec<Option<ServerStats>> {
    let mut out = Vec::new();
    for a in admin {
        out.push(a.stats().await.ok());
    }
    out
}

fn bytes_out(stats: &[Option<ServerStats>]) -> Option<u64> {
    stats.iter().map(|s| s.as_ref().map(|s| s.bytes_out)).sum()
}

/// Runs subscribers (and the publisher, if `rate > 0`) and reports.
pub async fn run(cfg: &BenchConfig) -> Result<BenchRun> {
    let (sample_tx, mut sample_rx) = mpsc::unbounded_channel::<(u64, f64)>();
    let shared = Arc::new(SubShared {
        counts: Counts::default(),
        connected: AtomicUsize::new(0),
        reconnects: AtomicU64::new(0),
        samples: sample_tx,
    });
    // single writer of the sample set
    let collector = tokio::spawn(async move {
        let mut v = Vec::new();
        while let Some(s) = sample_rx.recv().await {
            v.push(s);
        }
        v
    });

    let (stop_tx, stop_rx) = watch::channel(false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subs = JoinSet::new();
    let batch = (cfg.ramp / 100).max(1);
    for i in 0..cfg.connections {
        let topic = topic_name(&cfg.prefix, rng.gen_range(0..cfg.topics.max(1)));
        let mut ccfg = ClientConfig::new(cfg.servers.clone());
        ccfg.seed = rng.gen::<u64>() | 1;
        let client = Client::connect(ccfg);
        client.subscribe(&topic)?;
        subs.spawn(subscriber(client, topic, shared.clone(), stop_rx.clone()));
        if (i + 1) % batch == 0 {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
    let deadline = Instant::now() + Duration::from_secs(30);
    while shared.connected.load(Ordering::Relaxed) < cfg.connections && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let connected = shared.connected.load(Ordering::Relaxed);
    if (connected as f64) < cfg.min_connected * cfg.connections as f64 {
        let _ = stop_tx.send(true);
        bail!("only {connected} of {} connections came up", cfg.connections);
    }
    // let the last SUBSCRIBEs land
    tokio::time::sleep(Duration::from_millis(500)).await;

    let zero = wall_nanos();
    if let Some(s) = &cfg.started {
        s.send_replace(Some(zero));
    }
    let t0 = Instant::now();
    let publisher = (cfg.rate > 0.0).then(|| {
        let mut p = PubConfig::new(cfg.servers.clone());
        p.topics = cfg.topics;
        p.rate = cfg.rate;
        p.payload = cfg.payload;
        p.duration = cfg.warmup + cfg.duration;
        p.prefix = cfg.prefix.clone();
        p.seed = cfg.seed;
        tokio::spawn(run_pub(p))
    });

    let admin: Vec<AdminClient> = cfg.admin.iter().map(AdminClient::new).collect();
    let mut samplers: Vec<CpuSampler> = cfg.broker_pids.iter().map(|p| CpuSampler::new(*p)).collect();
    tokio::time::sleep_until(t0 + cfg.warmup).await;
    let window_start = (Instant::now(), broker_stats(&admin).await);
    for s in &mut samplers {
        s.sample();
    }
    let window_end = t0 + cfg.warmup + cfg.duration;
    let mut tick = tokio::time::interval_at(Instant::now() + Duration::from_secs(1), Duration::from_secs(1));
    while Instant::now() < window_end {
        tokio::select! {
            _ = tick.tick() => samplers.iter_mut().for_each(CpuSampler::sample),
            _ = tokio::time::sleep_until(window_end) => {}
        }
    }
    let window_stop = (Instant::now(), broker_stats(&admin).await);

    let published = match publisher {
        Some(h) => Some(h.await??),
        None => None,
    };
    tokio::time::sleep(cfg.drain).await;
    let brokers = broker_stats(&admin).await;
    let per_server = shared.counts.snapshot();
    let _ = stop_tx.send(true);
    let mut records = Vec::with_capacity(cfg.connections);
    while let Some(r) = subs.join_next().await {
        if let Ok(r) = r {
            records.push(r);
        }
    }
    let reconnects = shared.reconnects.load(Ordering::Relaxed);
    drop(shared);
    let raw = collector.await?;

    let ns = |d: Duration| d.as_nanos() as u64;
    let from = zero + ns(cfg.warmup);
    let until = zero + ns(cfg.warmup + cfg.duration);
    let samples: Vec<Sample> = raw
        .iter()
        .map(|(at, l)| Sample { at: Duration::from_nanos(at.saturating_sub(zero)), latency_ms: *l })
        .collect();
    let in_window: Vec<f64> = raw.iter().filter(|(at, _)| *at >= from && *at < until).map(|(_, l)| *l).collect();

    let log = published.as_ref().map_or(&[][..], |p| p.log.as_slice());
    let audit = audit(log, &records, from, until, SETTLE);

    let elapsed = window_stop.0.duration_since(window_start.0).as_secs_f64();
    let gbps = match (bytes_out(&window_start.1), bytes_out(&window_stop.1)) {
        (Some(a), Some(b)) if elapsed > 0.0 && !admin.is_empty() => Some((b.saturating_sub(a) * 8) as f64 / elapsed / 1e9),
        _ => None,
    };
    let cpu_percent =
        samplers.iter().map(CpuSampler::mean).try_fold(0.0, |acc, m| m.map(|m| acc + m)).filter(|_| !samplers.is_empty());

    let report = BenchReport {
        connections: ConnectionReport { requested: cfg.connections, connected, reconnects, per_server },
        topics: cfg.topics,
        rate_per_topic: cfg.rate,
        payload_bytes: cfg.payload,
        warmup_s: cfg.warmup.as_secs_f64(),
        duration_s: cfg.duration.as_secs_f64(),
        published,
        received: in_window.len() as u64,
        latency_ms: stats(&in_window),
        cpu_percent,
        gbps,
        audit,
        brokers,
    };
    Ok(BenchRun { report, samples, zero, subscribers: records, window: (from, until) })
}

