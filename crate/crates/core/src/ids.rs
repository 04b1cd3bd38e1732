//! Identifiers shared by every component.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest topic name accepted, in bytes.
pub const MAX_TOPIC_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("topic name is empty")]
    EmptyTopic,
    #[error("topic name is {0} bytes, limit is {MAX_TOPIC_LEN}")]
    TopicTooLong(usize),
    #[error("topic name contains control character {0:?}")]
    ControlCharacter(char),
    #[error("group index {index} out of range for {num_groups} groups")]
    GroupOutOfRange { index: u32, num_groups: u32 },
    #[error("invalid order key {0:?}")]
    InvalidOrderKey(String),
}

/// A validated topic name. Cloning is a reference-count bump.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(Arc<str>);

impl TopicName {
    pub fn new(name: impl AsRef<str>) -> Result<Self, IdError> {
        let name = name.as_ref();
        if name.is_empty() {
            return Err(IdError::EmptyTopic);
        }
        if name.len() > MAX_TOPIC_LEN {
            return Err(IdError::TopicTooLong(name.len()));
        }
        if let Some(c) = name.chars().find(|c| c.is_control()) {
            return Err(IdError::ControlCharacter(c));
        }
        Ok(Self(Arc::from(name)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl fmt::Debug for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<&str> for TopicName {
    type Error = IdError;
    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl Serialize for TopicName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for TopicName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        TopicName::new(s).map_err(serde::de::Error::custom)
    }
}

/// Index of a topic group: the unit of coordinator assignment and of
/// cache lock sharding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId(u32);

impl GroupId {
    pub fn new(index: u32, num_groups: u32) -> Result<Self, IdError> {
        if index >= num_groups {
            return Err(IdError::GroupOutOfRange { index, num_groups });
        }
        Ok(Self(index))
    }

    /// Wraps an index already known to be in range (decoded from a peer
    /// or produced by [`crate::topic_group`]).
    pub(crate) fn from_raw(index: u32) -> Self {
        Self(index)
    }

    pub fn index(self) -> u32 {
        self.0
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

/// Position of a message in its topic's total order.
///
/// Keys compare lexicographically on `(epoch, seq)`. Both components start
/// at 1; `(0, 0)` is [`OrderKey::ZERO`], meaning "nothing received yet".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct OrderKey {
    pub epoch: u64,
    pub seq: u64,
}

impl OrderKey {
    pub const ZERO: OrderKey = OrderKey { epoch: 0, seq: 0 };
    /// Precedes every assigned key. Resuming after it replays the whole
    /// cached history, unlike [`Self::ZERO`] which means "from now on".
    pub const ORIGIN: OrderKey = OrderKey { epoch: 0, seq: 1 };

    pub const fn new(epoch: u64, seq: u64) -> Self {
        Self { epoch, seq }
    }

    pub fn is_zero(self) -> bool {
        self == Self::ZERO
    }

    /// The key preceding this one inside the same epoch, or [`Self::ZERO`]
    /// when the predecessor lives in an earlier, unknown epoch.
    pub fn same_epoch_predecessor(self) -> OrderKey {
        if self.seq > 1 {
            OrderKey::new(self.epoch, self.seq - 1)
        } else {
            OrderKey::ZERO
        }
    }
}

impl fmt::Display for OrderKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.epoch, self.seq)
    }
}

impl std::str::FromStr for OrderKey {
    type Err = IdError;

    /// Parses `epoch.seq` or `epoch,seq`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IdError::InvalidOrderKey(s.to_string());
        let trimmed = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (e, q) = trimmed.split_once(['.', ',']).ok_or_else(bad)?;
        Ok(OrderKey::new(
            e.trim().parse().map_err(|_| bad())?,
            q.trim().parse().map_err(|_| bad())?,
        ))
    }
}

/// Three-way comparison of two order keys.
pub fn compare(a: OrderKey, b: OrderKey) -> Ordering {
    a.cmp(&b)
}

/// Cluster member identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServerId(pub u16);

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

/// Publisher-chosen 128-bit message identifier, used for duplicate
/// filtering and for matching acknowledgements.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MsgId(pub u128);

impl MsgId {
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        Self(rng.gen())
    }
}

impl fmt::Debug for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// Broker-local identifier of a client connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnectionId(pub u64);

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topic_validation() {
        assert!(TopicName::new("scores/soccer").is_ok());
        assert_eq!(TopicName::new(""), Err(IdError::EmptyTopic));
        assert_eq!(TopicName::new("a".repeat(256)), Err(IdError::TopicTooLong(256)));
        assert!(TopicName::new("a".repeat(255)).is_ok());
        assert_eq!(TopicName::new("a\nb"), Err(IdError::ControlCharacter('\n')));
        // multi-byte characters count by bytes, not chars
        assert!(TopicName::new("é".repeat(128)).is_err());
    }

    #[test]
    fn compare_examples() {
        assert_eq!(compare(OrderKey::new(1, 5), OrderKey::new(1, 5)), Ordering::Equal);
        assert_eq!(compare(OrderKey::new(1, 9), OrderKey::new(2, 1)), Ordering::Less);
        assert_eq!(compare(OrderKey::new(3, 1), OrderKey::new(2, 99)), Ordering::Greater);
    }

    fn permutations(items: &[OrderKey]) -> Vec<Vec<OrderKey>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let head = rest.remove(i);
            for mut tail in permutations(&rest) {
                tail.insert(0, head);
                out.push(tail);
            }
        }
        out
    }

    #[test]
    fn sorting_every_permutation_gives_lexicographic_sequence() {
        let expected = vec![
            OrderKey::new(1, 1),
            OrderKey::new(1, 2),
            OrderKey::new(2, 1),
            OrderKey::new(2, 2),
        ];
        let perms = permutations(&expected);
        assert_eq!(perms.len(), 24);
        for mut p in perms {
            p.sort_by(|a, b| compare(*a, *b));
            assert_eq!(p, expected);
        }
    }

    #[test]
    fn compare_is_a_total_order_on_small_domain() {
        let dom: Vec<OrderKey> = (0..4)
            .flat_map(|e| (0..4).map(move |s| OrderKey::new(e, s)))
            .collect();
        for &a in &dom {
            for &b in &dom {
                // antisymmetry and totality
                assert_eq!(compare(a, b), compare(b, a).reverse());
                assert_eq!(compare(a, b) == Ordering::Equal, a == b);
                for &c in &dom {
                    if compare(a, b) != Ordering::Greater && compare(b, c) != Ordering::Greater {
                        assert_ne!(compare(a, c), Ordering::Greater);
                    }
                }
            }
        }
    }

    #[test]
    fn order_key_parsing() {
        assert_eq!("2.7".parse::<OrderKey>().unwrap(), OrderKey::new(2, 7));
        assert_eq!("(1,3)".parse::<OrderKey>().unwrap(), OrderKey::new(1, 3));
        assert!("x".parse::<OrderKey>().is_err());
    }

    #[test]
    fn group_range() {
        assert!(GroupId::new(99, 100).is_ok());
        assert!(GroupId::new(100, 100).is_err());
    }
}
