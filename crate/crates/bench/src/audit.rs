//! Completeness and order audit of deliveries against the publisher log.

use std::collections::{BTreeMap, HashSet};

use migrant_core::OrderKey;
use serde::{Deserialize, Serialize};

/// One acknowledged publication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PubRecord {
    pub topic: String,
    pub key: OrderKey,
    /// Wall-clock nanoseconds of the first send.
    pub sent_at: u64,
}

/// What one subscriber received.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubRecord {
    pub topic: String,
    /// Wall-clock nanoseconds of its first connection; `None` if it never
    /// connected.
    pub connected_at: Option<u64>,
    /// Keys in delivery order.
    pub keys: Vec<OrderKey>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    /// (publication, subscriber) pairs that had to be delivered.
    pub expected: u64,
    pub missing: u64,
    pub duplicates: u64,
    pub out_of_order: u64,
    /// Subscribers skipped because they never connected.
    pub unconnected: u64,
    /// A few missing deliveries, for diagnosis.
    pub examples: Vec<String>,
}

impl AuditReport {
    pub fn clean(&self) -> bool {
        self.missing == 0 && self.duplicates == 0 && self.out_of_order == 0
    }
}

/// Every publication sent in `[from, until)` must reach every subscriber of
/// its topic that was connected `settle` nanoseconds before the send.
pub fn audit(pubs: &[PubRecord], subs: &[SubRecord], from: u64, until: u64, settle: u64) -> AuditReport {
    let mut by_topic: BTreeMap<&str, Vec<&PubRecord>> = BTreeMap::new();
    for p in pubs.iter().filter(|p| p.sent_at >= from && p.sent_at < until) {
        by_topic.entry(p.topic.as_str()).or_default().push(p);
    }
    let mut r = AuditReport::default();
    for (i, s) in subs.iter().enumerate() {
        r.out_of_order += s.keys.windows(2).filter(|w| w[1] < w[0]).count() as u64;
        let mut seen = HashSet::with_capacity(s.keys.len());
        for k in &s.keys {
            if !seen.insert(*k) {
                r.duplicates += 1;
            }
        }
        let Some(connected_at) = s.connected_at else {
            r.unconnected += 1;
            continue;
        };
        for p in by_topic.get(s.topic.as_str()).into_iter().flatten() {
            if p.sent_at < connected_at.saturating_add(settle) {
                continue;
            }
            r.expected += 1;
            if !seen.contains(&p.key) {
                r.missing += 1;
                if r.examples.len() < 10 {
                    r.examples.push(format!("subscriber {i} missed {} {}", p.topic, p.key));
                }
            }
        }
    }
    r
}
