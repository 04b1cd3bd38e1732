use std::collections::BTreeMap;

use super::*;
use crate::hash::topic_group;

const MS: Duration = Duration::from_millis(1);

struct Harness {
    now: Duration,
    nodes: BTreeMap<u16, ServerNode>,
    queue: BTreeMap<(Duration, u64), (u16, u16, Frame)>,
    seq: u64,
    cut: BTreeSet<u16>,
    drop_next: BTreeMap<(u16, u16), usize>,
    replies: Vec<(u16, Origin, Frame)>,
    events: Vec<(u16, NodeEvent)>,
}

fn topic(s: &str) -> TopicName {
    TopicName::new(s).unwrap()
}

fn publish(t: &str, id: u128) -> PublishRequest {
    PublishRequest {
        origin: Origin::Local(id as u64),
        publish: Publish { topic: topic(t), msg_id: MsgId(id), ack_requested: true, payload: Bytes::from_static(b"x") },
    }
}

impl Harness {
    fn new(n: u16) -> Self {
        let members: Vec<ServerId> = (1..=n).map(ServerId).collect();
        let nodes = members
            .iter()
            .map(|&id| {
                let mut cfg = NodeConfig::new(id, members.clone(), 8);
                cfg.seed = 11;
                (id.0, ServerNode::new(cfg, Arc::new(TopicCache::new(8, 100)), Duration::ZERO))
            })
            .collect();
        let mut h = Self {
            now: Duration::ZERO,
            nodes,
            queue: BTreeMap::new(),
            seq: 0,
            cut: BTreeSet::new(),
            drop_next: BTreeMap::new(),
            replies: Vec::new(),
            events: Vec::new(),
        };
        h.collect();
        h
    }

    fn collect(&mut self) {
        for (&id, node) in &mut self.nodes {
            for o in node.drain() {
                match o {
                    NodeOutput::ToPeer { peer, frame } => {
                        self.seq += 1;
                        self.queue.insert((self.now + MS, self.seq), (id, peer.0, frame));
                    }
                    NodeOutput::Reply { origin, frame } => self.replies.push((id, origin, frame)),
                    NodeOutput::Event(e) => self.events.push((id, e)),
                    NodeOutput::Deliver(_) | NodeOutput::CloseClients(_) => {}
                }
            }
        }
    }

    fn run_for(&mut self, d: Duration) {
        let end = self.now + d;
        while self.now < end {
            self.now += MS;
            while let Some(entry) = self.queue.first_entry() {
                if entry.key().0 > self.now {
                    break;
                }
                let (from, to, frame) = entry.remove();
                let blocked = self.cut.contains(&from) != self.cut.contains(&to);
                let dropped = match self.drop_next.get_mut(&(from, to)) {
                    Some(n) if *n > 0 && matches!(frame, Frame::Replicate(_)) => {
                        *n -= 1;
                        true
                    }
                    _ => false,
                };
                if !blocked && !dropped {
                    if let Some(node) = self.nodes.get_mut(&to) {
                        node.handle_peer_frame(self.now, ServerId(from), frame);
                    }
                }
                self.collect();
            }
            if self.now.as_millis().is_multiple_of(10) {
                let now = self.now;
                for node in self.nodes.values_mut() {
                    node.tick(now);
                }
                self.collect();
            }
        }
    }

    fn publish(&mut self, at: u16, req: PublishRequest) {
        let now = self.now;
        self.nodes.get_mut(&at).unwrap().handle_publish(now, req);
        self.collect();
    }

    fn reply_for(&self, id: u128) -> Option<&Frame> {
        self.replies.iter().rev().find_map(|(_, _, f)| match f {
            Frame::PubAck { msg_id, .. } | Frame::PubNack { msg_id, .. } if msg_id.0 == id => Some(f),
            _ => None,
        })
    }

    fn acked_key(&self, id: u128) -> Option<OrderKey> {
        match self.reply_for(id) {
            Some(Frame::PubAck { key, .. }) => Some(*key),
            _ => None,
        }
    }

    /// Publishes and retries on NACK until acknowledged.
    fn publish_acked(&mut self, at: u16, t: &str, id: u128) -> OrderKey {
        for _ in 0..40 {
            self.publish(at, publish(t, id));
            self.run_for(600 * MS);
            if let Some(k) = self.acked_key(id) {
                return k;
            }
        }
        panic!("publication {id} never acknowledged: {:?}", self.reply_for(id));
    }

    fn holders(&self, t: &str, key: OrderKey) -> usize {
        self.nodes.values().filter(|n| n.cache().contains(&topic(t), key)).count()
    }
}

#[test]
fn single_server_sequences_locally() {
    let mut cfg = NodeConfig::new(ServerId(1), vec![ServerId(1)], 8);
    cfg.seed = 1;
    let cache = Arc::new(TopicCache::new(8, 10));
    let mut node = ServerNode::new(cfg, cache.clone(), Duration::ZERO);
    node.tick(MS);
    assert!(node.accepting_clients());
    let mut keys = Vec::new();
    for i in 1..=3 {
        node.handle_publish(MS, publish("scores/soccer", i));
        for o in node.drain() {
            if let NodeOutput::Reply { frame: Frame::PubAck { key, .. }, .. } = o {
                keys.push(key);
            }
        }
    }
    assert_eq!(keys, vec![OrderKey::new(1, 1), OrderKey::new(1, 2), OrderKey::new(1, 3)]);
    assert_eq!(cache.len(&topic("scores/soccer")), 3);
}

#[test]
fn three_servers_ack_after_two_copies() {
    let mut h = Harness::new(3);
    h.run_for(3000 * MS);
    assert!(h.nodes.values().all(|n| n.accepting_clients()));
    let k1 = h.publish_acked(1, "a", 1);
    assert_eq!(k1, OrderKey::new(1, 1));
    assert!(h.holders("a", k1) >= 2);
    let k2 = h.publish_acked(2, "a", 2);
    assert_eq!(k2, OrderKey::new(1, 2));
    h.run_for(100 * MS);
    assert_eq!(h.holders("a", k2), 3);
    for (node, e) in &h.events {
        if let NodeEvent::Acked { topic: t, key, .. } = e {
            assert!(h.holders(t.as_str(), *key) >= 2, "node {node} acked {key}");
        }
    }
}

#[test]
fn seq_is_per_topic_within_a_group() {
    let mut h = Harness::new(3);
    h.run_for(3000 * MS);
    let a = "a";
    let group = topic_group(&topic(a), 8);
    let b = (0..1000).map(|i| format!("b{i}")).find(|t| topic_group(&topic(t), 8) == group).unwrap();
    assert_eq!(h.publish_acked(1, a, 1), OrderKey::new(1, 1));
    assert_eq!(h.publish_acked(1, a, 2), OrderKey::new(1, 2));
    assert_eq!(h.publish_acked(1, &b, 3), OrderKey::new(1, 1));
}

#[test]
fn dropped_broadcast_is_repaired() {
    let mut h = Harness::new(3);
    h.run_for(3000 * MS);
    h.publish_acked(1, "a", 1);
    let owner = h.nodes.values().find(|n| !n.owned_groups(h.now).is_empty()).unwrap().id().0;
    let victim = (1..=3).find(|i| *i != owner).unwrap();
    h.drop_next.insert((owner, victim), 1);
    h.publish_acked(1, "a", 2);
    h.publish_acked(1, "a", 3);
    h.run_for(1000 * MS);
    let snap = h.nodes[&victim].cache().snapshot();
    assert_eq!(snap, h.nodes[&owner].cache().snapshot());
    let keys = &snap[&topic("a")];
    assert!(keys.len() >= 3);
    assert!(keys.iter().enumerate().all(|(i, k)| *k == OrderKey::new(1, i as u64 + 1)));
}

#[test]
fn crashed_coordinator_is_replaced_with_next_epoch() {
    let mut h = Harness::new(3);
    h.run_for(3000 * MS);
    h.publish_acked(1, "a", 1);
    let group = topic_group(&topic("a"), 8);
    let owner = h.nodes.values().find(|n| n.owns(group, h.now)).unwrap().id().0;
    h.nodes.remove(&owner);
    let contact = (1..=3).find(|i| *i != owner).unwrap();
    let k = h.publish_acked(contact, "a", 2);
    assert_eq!(k, OrderKey::new(2, 1));
    let won: Vec<u64> = h
        .events
        .iter()
        .filter_map(|(_, e)| match e {
            NodeEvent::Won { group: g, epoch } if *g == group => Some(*epoch),
            _ => None,
        })
        .collect();
    assert_eq!(won, vec![1, 2]);
}

#[test]
fn isolated_server_fences_and_rejoins() {
    let mut h = Harness::new(3);
    h.run_for(3000 * MS);
    for i in 1..=5 {
        h.publish_acked(1, &format!("t{i}"), i);
    }
    h.cut.insert(3);
    let cut_at = h.now;
    h.run_for(8000 * MS);
    let fenced_at = h.events.iter().position(|(n, e)| *n == 3 && *e == NodeEvent::Fenced);
    assert!(fenced_at.is_some(), "isolated server never fenced");
    assert!(!h.events.iter().any(|(n, e)| *n != 3 && *e == NodeEvent::Fenced));
    assert!(h.now - cut_at <= Duration::from_secs(8));
    for i in 6..=8 {
        h.publish_acked(1, &format!("t{i}"), i);
    }
    h.cut.clear();
    h.run_for(5000 * MS);
    assert!(h.nodes[&3].accepting_clients());
    let reference = h.nodes[&1].cache().snapshot();
    for n in h.nodes.values() {
        assert_eq!(n.cache().snapshot(), reference, "node {}", n.id());
    }
}
