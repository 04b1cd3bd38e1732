//! Runs a scenario to completion and judges its trace.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use migrant_core::{OrderKey, ServerId, TopicName};

use crate::assertions::{self, Context, Verdict};
use crate::scenario::{AssertionKind, Scenario};
use crate::trace::{Trace, TraceEntry};
use crate::world::{World, WorldStats};

/// Granularity of the liveness checks once publishing has stopped.
const CHECK_EVERY: Duration = Duration::from_secs(1);
/// Session timeout plus one second of slack.
pub const FENCE_DEADLINE: Duration = Duration::from_secs(6);
/// Entries of context shown around a failure.
const EXCERPT: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail {
        assertion: AssertionKind,
        reason: String,
        /// Length of the shortest trace prefix that already fails. Equals
        /// the full length for end-of-run assertions.
        prefix_len: usize,
        excerpt: Vec<String>,
    },
    /// A liveness assertion was still pending at the horizon.
    HorizonExceeded { assertion: AssertionKind, reason: String },
}

impl Outcome {
    pub fn is_pass(&self) -> bool {
        matches!(self, Outcome::Pass)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Pass => write!(f, "PASS"),
            Outcome::Fail { assertion, reason, prefix_len, excerpt } => {
                writeln!(f, "FAIL {assertion}: {reason} (minimal failing prefix: {prefix_len} entries)")?;
                for line in excerpt {
                    writeln!(f, "  {line}")?;
                }
                Ok(())
            }
            Outcome::HorizonExceeded { assertion, reason } => write!(f, "HORIZON-EXCEEDED {assertion}: {reason}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub trace_hash: u64,
    /// Virtual time at which the run stopped.
    pub ended_at: Duration,
    pub stats: WorldStats,
    pub trace: Trace,
}

fn caches(world: &World) -> Vec<(ServerId, BTreeMap<TopicName, Vec<OrderKey>>)> {
    (0..world.servers())
        .filter_map(|i| world.broker(i))
        .map(|b| (b.id(), b.cache().snapshot()))
        .collect()
}

fn judge_liveness(world: &World, sc: &Scenario, trace: &[TraceEntry]) -> Vec<(AssertionKind, Verdict)> {
    let snaps = caches(world);
    let ctx = Context {
        workload: &sc.workload,
        faults: &sc.faults,
        servers: sc.config.servers,
        caches: &snaps,
        fence_deadline: FENCE_DEADLINE,
    };
    sc.assertions
        .iter()
        .filter(|a| !assertions::is_safety(**a) && **a != AssertionKind::Fencing)
        .map(|a| (*a, assertions::check(*a, trace, &ctx)))
        .collect()
}

/// Smallest `n` such that the assertion fails on `trace[..n]`.
fn minimal_prefix(kind: AssertionKind, trace: &[TraceEntry], ctx: &Context<'_>) -> usize {
    let (mut lo, mut hi) = (0, trace.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if assertions::check(kind, &trace[..mid], ctx).is_fail() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

fn excerpt(trace: &[TraceEntry], end: usize) -> Vec<String> {
    trace[end.saturating_sub(EXCERPT)..end].iter().map(ToString::to_string).collect()
}

pub fn run(sc: &Scenario) -> RunReport {
    let mut world = World::new(sc);
    let horizon = sc.config.horizon;
    let last_fault = sc.faults.events.last().map_or(Duration::ZERO, |(t, _)| *t);
    let stop = sc.workload.publish_stop.max(last_fault);
    let mut t = Duration::ZERO;
    while t < horizon {
        t = (t + CHECK_EVERY).min(horizon);
        world.run_until(t);
        if t >= stop + CHECK_EVERY && world.clients_started() && world.client_outstanding() == 0 {
            let settled = judge_liveness(&world, sc, world.trace().entries()).iter().all(|(_, v)| *v == Verdict::Pass);
            // isolated servers still have to be given their fencing window
            let fence_pending = sc.faults.isolations().iter().any(|(_, at, _)| *at + FENCE_DEADLINE > t);
            if settled && !fence_pending {
                break;
            }
        }
    }
    let outcome = judge(&world, sc);
    let ended_at = world.now();
    let stats = world.stats();
    let trace = world.into_trace();
    RunReport { name: sc.name.clone(), seed: sc.config.seed, outcome, trace_hash: trace.hash(), ended_at, stats, trace }
}

fn judge(world: &World, sc: &Scenario) -> Outcome {
    let trace = world.trace().entries();
    let snaps = caches(world);
    let ctx = Context {
        workload: &sc.workload,
        faults: &sc.faults,
        servers: sc.config.servers,
        caches: &snaps,
        fence_deadline: FENCE_DEADLINE,
    };
    let mut pending = None;
    for &kind in &sc.assertions {
        match assertions::check(kind, trace, &ctx) {
            Verdict::Pass => {}
            Verdict::Fail(reason) => {
                let prefix_len =
                    if assertions::is_safety(kind) { minimal_prefix(kind, trace, &ctx) } else { trace.len() };
                return Outcome::Fail { assertion: kind, reason, prefix_len, excerpt: excerpt(trace, prefix_len) };
            }
            Verdict::Pending(reason) => {
                pending.get_or_insert(Outcome::HorizonExceeded { assertion: kind, reason });
            }
        }
    }
    pending.unwrap_or(Outcome::Pass)
}

/// Summary of a multi-seed sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub runs: usize,
    pub failures: Vec<(u64, Outcome)>,
}

impl SweepReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn sweep(sc: &Scenario, seeds: impl IntoIterator<Item = u64>, mut each: impl FnMut(&RunReport)) -> SweepReport {
    let mut report = SweepReport::default();
    for seed in seeds {
        let r = run(&sc.clone().with_seed(seed));
        each(&r);
        report.runs += 1;
        if !r.outcome.is_pass() {
            report.failures.push((seed, r.outcome));
        }
    }
    report
}
