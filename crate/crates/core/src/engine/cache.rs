//! Per-topic history of recent messages, sharded by topic group.
//!
//! Each group has its own lock, so appends for topics in different groups
//! never wait on each other. Every entry remembers the key that preceded it
//! when it was appended; readers use that to report gaps.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, MutexGuard};

use crate::hash::topic_group;
use crate::ids::{GroupId, OrderKey, TopicName};
use crate::message::Message;
use crate::wire::ChainedMessage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedEntry {
    pub message: Arc<Message>,
    pub prev: OrderKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppendOutcome {
    Appended { evicted: Option<OrderKey> },
    /// The key is already cached.
    Duplicate,
    /// The key is not greater than the newest cached key for the topic.
    OutOfOrder { last: OrderKey },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheRead {
    pub messages: Vec<Arc<Message>>,
    /// Some message between `after` and the returned suffix is missing.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LockStats {
    pub acquisitions: u64,
    /// Acquisitions that found the lock already held.
    pub contended: u64,
}

#[derive(Default)]
struct GroupSlot {
    topics: Mutex<HashMap<TopicName, VecDeque<CachedEntry>>>,
    acquisitions: AtomicU64,
    contended: AtomicU64,
}

impl GroupSlot {
    fn lock(&self) -> MutexGuard<'_, HashMap<TopicName, VecDeque<CachedEntry>>> {
        self.acquisitions.fetch_add(1, Ordering::Relaxed);
        if let Some(g) = self.topics.try_lock() {
            return g;
        }
        self.contended.fetch_add(1, Ordering::Relaxed);
        self.topics.lock()
    }
}

pub struct TopicCache {
    groups: Box<[GroupSlot]>,
    depth: usize,
}

impl std::fmt::Debug for TopicCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TopicCache").field("groups", &self.groups.len()).field("depth", &self.depth).finish()
    }
}

fn first_after(entries: &VecDeque<CachedEntry>, after: OrderKey) -> usize {
    entries.partition_point(|e| e.message.key <= after)
}

fn read_suffix(entries: &VecDeque<CachedEntry>, after: OrderKey) -> CacheRead {
    let start = first_after(entries, after);
    let mut read = CacheRead::default();
    let mut previous: Option<OrderKey> = None;
    for e in entries.range(start..) {
        let gap = match previous {
            None => e.prev > after,
            Some(p) => e.prev != p,
        };
        read.truncated |= gap;
        previous = Some(e.message.key);
        read.messages.push(e.message.clone());
    }
    read
}

impl TopicCache {
    /// # Panics
    ///
    /// If `num_groups` or `depth` is zero.
    pub fn new(num_groups: u32, depth: usize) -> Self {
        assert!(num_groups >= 1 && depth >= 1);
        Self { groups: (0..num_groups).map(|_| GroupSlot::default()).collect(), depth }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_groups(&self) -> u32 {
        self.groups.len() as u32
    }

    pub fn group_of(&self, topic: &TopicName) -> GroupId {
        topic_group(topic, self.num_groups())
    }

    fn slot(&self, topic: &TopicName) -> &GroupSlot {
        &self.groups[self.group_of(topic).index() as usize]
    }

    /// Appends `m` after the newest cached message of its topic.
    pub fn append(&self, m: Arc<Message>) -> AppendOutcome {
        let mut topics = self.slot(&m.topic).lock();
        let entries = topics.entry(m.topic.clone()).or_default();
        let prev = entries.back().map(|e| e.message.key).unwrap_or_else(|| m.key.same_epoch_predecessor());
        self.push(entries, m, prev)
    }

    /// Appends `m`, recording `prev` as its predecessor in the sender's
    /// history. The caller decides whether the chain is intact.
    pub fn append_chained(&self, m: Arc<Message>, prev: OrderKey) -> AppendOutcome {
        let mut topics = self.slot(&m.topic).lock();
        let entries = topics.entry(m.topic.clone()).or_default();
        self.push(entries, m, prev)
    }

    fn push(&self, entries: &mut VecDeque<CachedEntry>, message: Arc<Message>, prev: OrderKey) -> AppendOutcome {
        if let Some(last) = entries.back().map(|e| e.message.key) {
            if message.key <= last {
                let idx = first_after(entries, message.key);
                if idx > 0 && entries[idx - 1].message.key == message.key {
                    return AppendOutcome::Duplicate;
                }
                return AppendOutcome::OutOfOrder { last };
            }
        }
        entries.push_back(CachedEntry { message, prev });
        let evicted = if entries.len() > self.depth { entries.pop_front().map(|e| e.message.key) } else { None };
        AppendOutcome::Appended { evicted }
    }

    /// All cached messages of `topic` with a key greater than `after`.
    pub fn read_after(&self, topic: &TopicName, after: OrderKey) -> CacheRead {
        let topics = self.slot(topic).lock();
        topics.get(topic).map(|e| read_suffix(e, after)).unwrap_or_default()
    }

    /// The newest key and the suffix after `resume`, read atomically. A
    /// zero `resume` means "from now on" and reads nothing.
    pub fn subscribe_view(&self, topic: &TopicName, resume: OrderKey) -> (OrderKey, CacheRead) {
        let topics = self.slot(topic).lock();
        match topics.get(topic) {
            None => (OrderKey::ZERO, CacheRead::default()),
            Some(entries) => {
                let head = entries.back().map(|e| e.message.key).unwrap_or(OrderKey::ZERO);
                let read = if resume.is_zero() { CacheRead::default() } else { read_suffix(entries, resume) };
                (head, read)
            }
        }
    }

    /// Newest cached key of `topic`, or [`OrderKey::ZERO`].
    pub fn head(&self, topic: &TopicName) -> OrderKey {
        let topics = self.slot(topic).lock();
        topics.get(topic).and_then(|e| e.back()).map(|e| e.message.key).unwrap_or(OrderKey::ZERO)
    }

    pub fn contains(&self, topic: &TopicName, key: OrderKey) -> bool {
        let topics = self.slot(topic).lock();
        topics.get(topic).is_some_and(|e| {
            let idx = first_after(e, key);
            idx > 0 && e[idx - 1].message.key == key
        })
    }

    pub fn len(&self, topic: &TopicName) -> usize {
        self.slot(topic).lock().get(topic).map_or(0, VecDeque::len)
    }

    /// Newest key of every topic cached in `group`, sorted by topic.
    pub fn group_heads(&self, group: GroupId) -> Vec<(TopicName, OrderKey)> {
        let topics = self.groups[group.index() as usize].lock();
        let mut heads: Vec<_> = topics
            .iter()
            .filter_map(|(t, e)| e.back().map(|last| (t.clone(), last.message.key)))
            .collect();
        heads.sort_by(|a, b| a.0.cmp(&b.0));
        heads
    }

    /// Entries of `group` newer than the requester's known heads. Topics
    /// missing from `known` are returned in full. Sorted by topic, then key.
    pub fn group_entries_after(&self, group: GroupId, known: &BTreeMap<TopicName, OrderKey>) -> Vec<ChainedMessage> {
        let topics = self.groups[group.index() as usize].lock();
        let mut names: Vec<&TopicName> = topics.keys().collect();
        names.sort();
        let mut out = Vec::new();
        for name in names {
            let entries = &topics[name];
            let after = known.get(name).copied().unwrap_or(OrderKey::ZERO);
            let start = first_after(entries, after);
            out.extend(
                entries
                    .range(start..)
                    .map(|e| ChainedMessage { message: (*e.message).clone(), prev: e.prev }),
            );
        }
        out
    }

    pub fn clear(&self) {
        for g in self.groups.iter() {
            g.lock().clear();
        }
    }

    /// Every cached key, by topic. Used for cross-server comparisons.
    pub fn snapshot(&self) -> BTreeMap<TopicName, Vec<OrderKey>> {
        let mut out = BTreeMap::new();
        for g in self.groups.iter() {
            for (t, e) in g.lock().iter() {
                if !e.is_empty() {
                    out.insert(t.clone(), e.iter().map(|c| c.message.key).collect());
                }
            }
        }
        out
    }

    pub fn total_messages(&self) -> usize {
        self.groups.iter().map(|g| g.lock().values().map(VecDeque::len).sum::<usize>()).sum()
    }

    pub fn lock_stats(&self, group: GroupId) -> LockStats {
        let g = &self.groups[group.index() as usize];
        LockStats {
            acquisitions: g.acquisitions.load(Ordering::Relaxed),
            contended: g.contended.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::MsgId;

    fn topic(s: &str) -> TopicName {
        TopicName::new(s).unwrap()
    }

    fn msg(t: &str, e: u64, s: u64) -> Arc<Message> {
        Arc::new(Message::new(topic(t), OrderKey::new(e, s), vec![s as u8], MsgId(u128::from(e << 32 | s))))
    }

    fn keys(r: &CacheRead) -> Vec<(u64, u64)> {
        r.messages.iter().map(|m| (m.key.epoch, m.key.seq)).collect()
    }

    #[test]
    fn append_to_empty_topic() {
        let c = TopicCache::new(1, 10);
        assert_eq!(c.append(msg("t", 1, 1)), AppendOutcome::Appended { evicted: None });
        assert_eq!(c.len(&topic("t")), 1);
    }

    #[test]
    fn eviction_is_oldest_first() {
        let c = TopicCache::new(4, 3);
        for s in 1..=4 {
            c.append(msg("t", 1, s));
        }
        let all = c.read_after(&topic("t"), OrderKey::ZERO);
        assert_eq!(keys(&all), vec![(1, 2), (1, 3), (1, 4)]);
    }

    #[test]
    fn out_of_order_and_duplicate_are_dropped() {
        let c = TopicCache::new(1, 10);
        c.append(msg("t", 1, 1));
        c.append(msg("t", 1, 3));
        assert_eq!(c.append(msg("t", 1, 3)), AppendOutcome::Duplicate);
        assert_eq!(c.append(msg("t", 1, 2)), AppendOutcome::OutOfOrder { last: OrderKey::new(1, 3) });
        assert_eq!(c.len(&topic("t")), 2);
    }

    #[test]
    fn read_after_examples() {
        let c = TopicCache::new(1, 10);
        assert_eq!(c.read_after(&topic("t"), OrderKey::ZERO), CacheRead::default());
        for s in 1..=5 {
            c.append(msg("t", 1, s));
        }
        let r = c.read_after(&topic("t"), OrderKey::new(1, 2));
        assert_eq!(keys(&r), vec![(1, 3), (1, 4), (1, 5)]);
        assert!(!r.truncated);

        let small = TopicCache::new(1, 2);
        for s in 1..=5 {
            small.append(msg("t", 1, s));
        }
        let r = small.read_after(&topic("t"), OrderKey::new(1, 1));
        assert_eq!(keys(&r), vec![(1, 4), (1, 5)]);
        assert!(r.truncated);
        let r = small.read_after(&topic("t"), OrderKey::new(1, 3));
        assert!(!r.truncated);
    }

    #[test]
    fn subscribe_view_reports_horizon_gap() {
        let c = TopicCache::new(1, 5);
        for s in 1..=15 {
            c.append(msg("t", 1, s));
        }
        let (head, r) = c.subscribe_view(&topic("t"), OrderKey::new(1, 3));
        assert_eq!(head, OrderKey::new(1, 15));
        assert!(r.truncated);
        assert_eq!(r.messages.first().unwrap().key, OrderKey::new(1, 11));
        let (_, fresh) = c.subscribe_view(&topic("t"), OrderKey::ZERO);
        assert!(fresh.messages.is_empty());
    }

    #[test]
    fn chained_gap_in_middle_is_reported() {
        let c = TopicCache::new(1, 10);
        c.append(msg("t", 1, 1));
        c.append(msg("t", 1, 2));
        c.append_chained(msg("t", 1, 5), OrderKey::new(1, 4));
        assert!(c.read_after(&topic("t"), OrderKey::ZERO).truncated);
        assert!(!c.read_after(&topic("t"), OrderKey::new(1, 4)).truncated);
    }

    #[test]
    fn epoch_change_chains_through_prev() {
        let c = TopicCache::new(1, 10);
        c.append(msg("t", 1, 1));
        c.append_chained(msg("t", 2, 1), OrderKey::new(1, 1));
        let r = c.read_after(&topic("t"), OrderKey::ZERO);
        assert_eq!(keys(&r), vec![(1, 1), (2, 1)]);
        assert!(!r.truncated);
    }

    #[test]
    fn different_groups_never_contend() {
        let c = Arc::new(TopicCache::new(8, 100));
        // find two topics in distinct groups
        let names: Vec<String> = (0..64).map(|i| format!("topic-{i}")).collect();
        let a = topic(&names[0]);
        let b = names
            .iter()
            .map(|n| topic(n))
            .find(|t| c.group_of(t) != c.group_of(&a))
            .unwrap();
        let handles: Vec<_> = [a.clone(), b.clone()]
            .into_iter()
            .map(|t| {
                let c = c.clone();
                std::thread::spawn(move || {
                    for s in 1..=20_000u64 {
                        c.append(Arc::new(Message::new(t.clone(), OrderKey::new(1, s), vec![], MsgId(s as u128))));
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        for t in [&a, &b] {
            let stats = c.lock_stats(c.group_of(t));
            assert_eq!(stats.acquisitions, 20_000);
            assert_eq!(stats.contended, 0);
        }
    }
}
