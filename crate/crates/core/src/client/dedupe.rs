use std::collections::{BTreeMap, HashSet, VecDeque};

use crate::ids::{MsgId, OrderKey, TopicName};

/// The last `capacity` message ids seen, with exact membership.
#[derive(Debug, Clone)]
pub struct DedupeBuffer {
    ring: VecDeque<MsgId>,
    set: HashSet<MsgId>,
    capacity: usize,
}

impl DedupeBuffer {
    /// # Panics
    ///
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        // grows on demand: an idle subscriber should cost little
        Self { ring: VecDeque::new(), set: HashSet::new(), capacity }
    }

    /// Records `id`; false if it is already in the window.
    pub fn insert(&mut self, id: MsgId) -> bool {
        if self.set.contains(&id) {
            return false;
        }
        if self.ring.len() == self.capacity {
            if let Some(old) = self.ring.pop_front() {
                self.set.remove(&old);
            }
        }
        self.ring.push_back(id);
        self.set.insert(id);
        true
    }

    pub fn contains(&self, id: MsgId) -> bool {
        self.set.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }
}

/// Last key received per subscribed topic. Keys only move forward.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResumeState {
    keys: BTreeMap<TopicName, OrderKey>,
}

impl ResumeState {
    pub fn track(&mut self, topic: TopicName) {
        self.keys.entry(topic).or_insert(OrderKey::ZERO);
    }

    pub fn untrack(&mut self, topic: &TopicName) {
        self.keys.remove(topic);
    }

    pub fn get(&self, topic: &TopicName) -> Option<OrderKey> {
        self.keys.get(topic).copied()
    }

    /// Moves the topic's key forward; false if `key` is not newer.
    pub fn advance(&mut self, topic: &TopicName, key: OrderKey) -> bool {
        match self.keys.get_mut(topic) {
            Some(k) if key > *k => {
                *k = key;
                true
            }
            _ => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TopicName, OrderKey)> {
        self.keys.iter().map(|(t, k)| (t, *k))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}
