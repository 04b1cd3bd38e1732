//! Clients of a crashed server must not reconnect in lockstep.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use migrant_core::ServerId;
use migrant_simnet::trace::TraceEvent;
use migrant_simnet::world::World;

#[test]
fn reconnects_are_spread_in_time() {
    let sc = common::scenario(
        "name herd\nservers 3\nhorizon 60s\ntopics 10\nsubscribers 1000\ntopics-per-subscriber 1\n\
         publish 4s 5s\nat 10s crash s1\n",
    );
    let mut world = World::new(&sc);
    world.run_until(Duration::from_secs(60));
    let crash = Duration::from_secs(10);
    let mut on_s1: BTreeSet<usize> = BTreeSet::new();
    let mut buckets: BTreeMap<u128, usize> = BTreeMap::new();
    let mut moved = 0;
    for e in world.trace().entries() {
        if let TraceEvent::ClientConnected { client, server } = e.event {
            if e.at < crash {
                if server == ServerId(1) {
                    on_s1.insert(client);
                } else {
                    on_s1.remove(&client);
                }
            } else if on_s1.remove(&client) {
                moved += 1;
                *buckets.entry(e.at.as_millis() / 100).or_default() += 1;
            }
        }
    }
    assert!(moved > 250, "only {moved} clients were on s1 and came back");
    assert!(on_s1.is_empty(), "{} clients never reconnected", on_s1.len());
    let max = buckets.values().copied().max().unwrap_or(0);
    eprintln!("{moved} clients moved, busiest 100 ms bucket {max}, {} buckets", buckets.len());
    assert!(max < 300, "{max} reconnects in one 100 ms bucket");
}
