//! Latency statistics: nearest-rank percentiles, population deviation.

use serde::{Deserialize, Serialize};

/// Summary of a set of latency samples in milliseconds. Every field but
/// `count` is `None` for an empty set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub median: Option<f64>,
    pub mean: Option<f64>,
    pub stdev: Option<f64>,
    pub p90: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Value at percentile `p` of ascending `sorted`: the element of rank
/// `ceil(p/100 * n)`, ranks counted from 1.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

pub fn stats(samples: &[f64]) -> LatencyStats {
    if samples.is_empty() {
        return LatencyStats::default();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // summing in sorted order keeps the result independent of input order
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    LatencyStats {
        count: sorted.len(),
        median: nearest_rank(&sorted, 50.0),
        mean: Some(mean),
        stdev: Some(var.sqrt()),
        p90: nearest_rank(&sorted, 90.0),
        p95: nearest_rank(&sorted, 95.0),
        p99: nearest_rank(&sorted, 99.0),
        min: sorted.first().copied(),
        max: sorted.last().copied(),
    }
}

impl LatencyStats {
    pub fn render(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        format!(
            "n={} median={} mean={} stdev={} p90={} p95={} p99={} max={} (ms)",
            self.count,
            f(self.median),
            f(self.mean),
            f(self.stdev),
            f(self.p90),
            f(self.p95),
            f(self.p99),
            f(self.max)
        )
    }
}
