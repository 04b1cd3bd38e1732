use std::collections::BTreeMap;
use std::time::Duration;

use crate::ids::{GroupId, ServerId};

/// Advisory group-to-coordinator map, filled lazily from announcements and
/// failed elections. A wrong entry costs a retry, never correctness.
#[derive(Debug, Default, Clone)]
pub struct GossipMap {
    entries: BTreeMap<GroupId, (ServerId, Duration)>,
}

impl GossipMap {
    pub fn get(&self, group: GroupId) -> Option<ServerId> {
        self.entries.get(&group).map(|(s, _)| *s)
    }

    pub fn updated_at(&self, group: GroupId) -> Option<Duration> {
        self.entries.get(&group).map(|(_, t)| *t)
    }

    pub fn set(&mut self, group: GroupId, owner: ServerId, now: Duration) {
        self.entries.insert(group, (owner, now));
    }

    pub fn invalidate(&mut self, group: GroupId) {
        self.entries.remove(&group);
    }

    /// Drops the entry only if it still names `owner`.
    pub fn invalidate_if(&mut self, group: GroupId, owner: ServerId) {
        if self.get(group) == Some(owner) {
            self.entries.remove(&group);
        }
    }

    /// Groups attributed to `owner`.
    pub fn groups_of(&self, owner: ServerId) -> Vec<GroupId> {
        self.entries.iter().filter(|(_, (s, _))| *s == owner).map(|(g, _)| *g).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalidate_if_only_matching_owner() {
        let g = GroupId::new(3, 10).unwrap();
        let mut m = GossipMap::default();
        m.set(g, ServerId(1), Duration::ZERO);
        m.invalidate_if(g, ServerId(2));
        assert_eq!(m.get(g), Some(ServerId(1)));
        m.invalidate_if(g, ServerId(1));
        assert_eq!(m.get(g), None);
    }

    #[test]
    fn groups_of_owner() {
        let mut m = GossipMap::default();
        for i in 0..6 {
            m.set(GroupId::new(i, 10).unwrap(), ServerId((i % 2) as u16), Duration::from_secs(1));
        }
        assert_eq!(m.groups_of(ServerId(1)).iter().map(|g| g.index()).collect::<Vec<_>>(), vec![1, 3, 5]);
    }
}
