//! Scenario files: cluster shape, workload, fault script and assertions.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! name crash-failover
//! seed 7
//! servers 3
//! link 1ms 10ms
//! horizon 90s
//! groups 100
//! cache-depth 1000
//! topics 10
//! publishers 3
//! subscribers 100
//! topics-per-subscriber 10
//! publish-interval 100ms
//! publish 4s 14s
//! clients-start 3s
//! ack on
//! at 8s crash s2
//! at 30s restart s2
//! at 8s partition s1 | s2 s3
//! at 12s heal
//! at 5s drop s1 s3 2 replicate
//! assert total-order
//! ```
//!
//! Servers are named `s1..sN`. Durations use the `humantime` syntax.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use migrant_core::wire::FrameKind;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    pub servers: usize,
    pub link_min: Duration,
    pub link_max: Duration,
    /// Virtual time at which the run stops.
    pub horizon: Duration,
    pub num_groups: u32,
    pub cache_depth: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            servers: 3,
            link_min: Duration::from_millis(1),
            link_max: Duration::from_millis(10),
            horizon: Duration::from_secs(120),
            num_groups: 100,
            cache_depth: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub topics: usize,
    pub publishers: usize,
    pub subscribers: usize,
    /// Topics each subscriber follows, assigned round-robin. `None` = all.
    pub topics_per_subscriber: Option<usize>,
    /// Gap between two publications of one publisher.
    pub publish_interval: Duration,
    pub publish_start: Duration,
    pub publish_stop: Duration,
    /// Clients are started at this time, or once every server accepts
    /// clients, whichever is later.
    pub clients_start: Duration,
    pub require_ack: bool,
    pub payload_bytes: usize,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            topics: 0,
            publishers: 0,
            subscribers: 0,
            topics_per_subscriber: None,
            publish_interval: Duration::from_millis(100),
            publish_start: Duration::from_secs(4),
            publish_stop: Duration::from_secs(10),
            clients_start: Duration::from_secs(3),
            require_ack: true,
            payload_bytes: 16,
        }
    }
}

impl Workload {
    pub fn topic_name(i: usize) -> String {
        format!("topic/{i}")
    }

    /// Indices of the topics followed by subscriber `s`.
    pub fn topics_of(&self, s: usize) -> Vec<usize> {
        if self.topics == 0 {
            return Vec::new();
        }
        let n = self.topics_per_subscriber.unwrap_or(self.topics).min(self.topics);
        (0..n).map(|i| (s + i) % self.topics).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Fault {
    Crash(usize),
    Restart(usize),
    /// Server-to-server links across different sets are cut. Client links
    /// are unaffected.
    Partition(Vec<Vec<usize>>),
    Heal,
    /// Drop the next `count` frames on the server link `from -> to`,
    /// optionally only those of one kind.
    DropNext { from: usize, to: usize, count: u32, kind: Option<FrameKind> },
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::Crash(s) => write!(f, "crash s{}", s + 1),
            Fault::Restart(s) => write!(f, "restart s{}", s + 1),
            Fault::Partition(sets) => {
                let sets: Vec<String> = sets
                    .iter()
                    .map(|set| set.iter().map(|s| format!("s{}", s + 1)).collect::<Vec<_>>().join(" "))
                    .collect();
                write!(f, "partition {}", sets.join(" | "))
            }
            Fault::Heal => write!(f, "heal"),
            Fault::DropNext { from, to, count, kind } => {
                write!(f, "drop s{} s{} {count}", from + 1, to + 1)?;
                if let Some(k) = kind {
                    write!(f, " {k:?}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultScript {
    pub events: Vec<(Duration, Fault)>,
}

impl FaultScript {
    /// Servers isolated alone by a partition, with the partition's start
    /// and the following heal, if any.
    pub fn isolations(&self) -> Vec<(usize, Duration, Option<Duration>)> {
        let mut out = Vec::new();
        for (i, (at, f)) in self.events.iter().enumerate() {
            if let Fault::Partition(sets) = f {
                let heal = self.events[i + 1..]
                    .iter()
                    .find(|(_, f)| matches!(f, Fault::Heal | Fault::Partition(_)))
                    .map(|(t, _)| *t);
                for set in sets.iter().filter(|s| s.len() == 1) {
                    out.push((set[0], *at, heal));
                }
            }
        }
        out
    }

    pub fn crashed_ever(&self) -> bool {
        self.events.iter().any(|(_, f)| matches!(f, Fault::Crash(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssertionKind {
    /// Per-topic strictly increasing keys at every subscriber, and equal
    /// payloads for equal keys across subscribers.
    TotalOrder,
    /// Every acknowledged publication reaches every subscriber of its
    /// topic exactly once at the application.
    AtLeastOnce,
    /// One coordinator per (group, epoch); epochs increase per group; never
    /// two servers owning one group at once.
    CoordinatorUnique,
    /// Two cached copies at every acknowledgement.
    TwoCopy,
    /// Isolated servers fence in time, others never do.
    Fencing,
    /// Live servers end with identical caches.
    CacheEquality,
    /// A detected gap is followed by a finished reconciliation.
    Reconcile,
    /// A restarted server rebuilds its cache before serving.
    Rebuild,
}

impl AssertionKind {
    pub const ALL: [AssertionKind; 8] = [
        AssertionKind::TotalOrder,
        AssertionKind::AtLeastOnce,
        AssertionKind::CoordinatorUnique,
        AssertionKind::TwoCopy,
        AssertionKind::Fencing,
        AssertionKind::CacheEquality,
        AssertionKind::Reconcile,
        AssertionKind::Rebuild,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AssertionKind::TotalOrder => "total-order",
            AssertionKind::AtLeastOnce => "at-least-once",
            AssertionKind::CoordinatorUnique => "coordinator-unique",
            AssertionKind::TwoCopy => "two-copy",
            AssertionKind::Fencing => "fencing",
            AssertionKind::CacheEquality => "cache-equality",
            AssertionKind::Reconcile => "reconcile",
            AssertionKind::Rebuild => "rebuild",
        }
    }
}

impl FromStr for AssertionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown assertion `{s}`"))
    }
}

impl fmt::Display for AssertionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub config: SimConfig,
    pub workload: Workload,
    pub faults: FaultScript,
    pub assertions: Vec<AssertionKind>,
}

impl Scenario {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let c = &self.config;
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        if c.servers == 0 || c.servers > 64 {
            return bad("servers must be in 1..=64");
        }
        if c.link_min > c.link_max || c.link_min.is_zero() {
            return bad("link delays must satisfy 0 < min <= max");
        }
        if c.num_groups == 0 || c.cache_depth == 0 {
            return bad("groups and cache-depth must be positive");
        }
        let w = &self.workload;
        if (w.publishers > 0 || w.subscribers > 0) && w.topics == 0 {
            return bad("clients need at least one topic");
        }
        if w.publish_interval.is_zero() {
            return bad("publish-interval must be positive");
        }
        for (_, f) in &self.faults.events {
            let ok = match f {
                Fault::Crash(s) | Fault::Restart(s) => *s < c.servers,
                Fault::Partition(sets) => sets.iter().flatten().all(|s| *s < c.servers),
                Fault::DropNext { from, to, .. } => *from < c.servers && *to < c.servers && from != to,
                Fault::Heal => true,
            };
            if !ok {
                return Err(ScenarioError::Invalid(format!("fault `{f}` names an unknown server")));
            }
        }
        Ok(())
    }
}

fn server(tok: &str) -> Result<usize, String> {
    tok.strip_prefix('s')
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .map(|n| n - 1)
        .ok_or_else(|| format!("expected a server name like s1, got `{tok}`"))
}

fn duration(tok: &str) -> Result<Duration, String> {
    humantime::parse_duration(tok).map_err(|e| format!("bad duration `{tok}`: {e}"))
}

fn number<T: FromStr>(tok: &str) -> Result<T, String> {
    tok.parse().map_err(|_| format!("bad number `{tok}`"))
}

fn frame_kind(tok: &str) -> Result<FrameKind, String> {
    let want = tok.replace(['_', '-'], "").to_ascii_lowercase();
    FrameKind::ALL
        .into_iter()
        .find(|k| format!("{k:?}").to_ascii_lowercase() == want)
        .ok_or_else(|| format!("unknown frame kind `{tok}`"))
}

fn parse_fault(toks: &[&str]) -> Result<Fault, String> {
    match toks {
        ["crash", s] => Ok(Fault::Crash(server(s)?)),
        ["restart", s] => Ok(Fault::Restart(server(s)?)),
        ["heal"] => Ok(Fault::Heal),
        ["partition", rest @ ..] => {
            let mut sets = vec![Vec::new()];
            for t in rest {
                if *t == "|" {
                    sets.push(Vec::new());
                } else {
                    sets.last_mut().expect("non-empty").push(server(t)?);
                }
            }
            if sets.len() < 2 || sets.iter().any(Vec::is_empty) {
                return Err("partition needs at least two non-empty sets separated by `|`".into());
            }
            Ok(Fault::Partition(sets))
        }
        ["drop", a, b, n] => Ok(Fault::DropNext { from: server(a)?, to: server(b)?, count: number(n)?, kind: None }),
        ["drop", a, b, n, k] => {
            Ok(Fault::DropNext { from: server(a)?, to: server(b)?, count: number(n)?, kind: Some(frame_kind(k)?) })
        }
        _ => Err(format!("unknown fault `{}`", toks.join(" "))),
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut sc = Scenario { name: "unnamed".into(), ..Scenario::default() };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            let res: Result<(), String> = (|| {
                let c = &mut sc.config;
                let w = &mut sc.workload;
                match toks.as_slice() {
                    ["name", n] => sc.name = (*n).to_string(),
                    ["seed", n] => c.seed = number(n)?,
                    ["servers", n] => c.servers = number(n)?,
                    ["link", a, b] => {
                        c.link_min = duration(a)?;
                        c.link_max = duration(b)?;
                    }
                    ["horizon", d] => c.horizon = duration(d)?,
                    ["groups", n] => c.num_groups = number(n)?,
                    ["cache-depth", n] => c.cache_depth = number(n)?,
                    ["topics", n] => w.topics = number(n)?,
                    ["publishers", n] => w.publishers = number(n)?,
                    ["subscribers", n] => w.subscribers = number(n)?,
                    ["topics-per-subscriber", n] => w.topics_per_subscriber = Some(number(n)?),
                    ["publish-interval", d] => w.publish_interval = duration(d)?,
                    ["publish", a, b] => {
                        w.publish_start = duration(a)?;
                        w.publish_stop = duration(b)?;
                    }
                    ["clients-start", d] => w.clients_start = duration(d)?,
                    ["payload", n] => w.payload_bytes = number(n)?,
                    ["ack", v] => {
                        w.require_ack = match *v {
                            "on" => true,
                            "off" => false,
                            other => return Err(format!("ack takes on|off, got `{other}`")),
                        }
                    }
                    ["at", t, rest @ ..] => {
                        let at = duration(t)?;
                        sc.faults.events.push((at, parse_fault(rest)?));
                    }
                    ["assert", a] => sc.assertions.push(a.parse()?),
                    _ => return Err(format!("unknown directive `{line}`")),
                }
                Ok(())
            })();
            res.map_err(|msg| ScenarioError::Parse { line: i + 1, msg })?;
        }
        sc.faults.events.sort_by_key(|(t, _)| *t);
        sc.validate()?;
        Ok(sc)
    }
}
