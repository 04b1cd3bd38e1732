use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crate::ids::{OrderKey, ServerId, TopicName};
use crate::wire::ChainedMessage;

/// Budget for the entries of one RECONCILE_RSP frame, well under the frame
/// limit.
pub const CHUNK_BYTES: usize = 512 * 1024;

/// Why a reconciliation round runs; decides what happens when it ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Catch up with peers after a gap, a reconnect or an ownership change.
    Follow,
    /// Collect the union of peer histories before sequencing as coordinator.
    Takeover,
    /// Refill an emptied cache after a restart or fencing.
    Rebuild,
}

#[derive(Debug)]
pub struct Round {
    pub request: u64,
    pub purpose: Purpose,
    pub waiting: BTreeSet<ServerId>,
    pub entries: Vec<ChainedMessage>,
    pub deadline: Duration,
    /// A further trigger arrived while this round was running.
    pub again: bool,
}

fn encoded_len(e: &ChainedMessage) -> usize {
    2 + e.message.topic.as_bytes().len() + 16 + 16 + 2 + e.message.payload.len() + 16
}

/// Splits response entries into frame-sized chunks. Always yields at least
/// one (possibly empty) chunk.
pub fn chunk_entries(entries: Vec<ChainedMessage>) -> Vec<Vec<ChainedMessage>> {
    let mut chunks = vec![Vec::new()];
    let mut size = 0;
    for e in entries {
        let n = encoded_len(&e);
        if size + n > CHUNK_BYTES && !chunks.last().is_some_and(Vec::is_empty) {
            chunks.push(Vec::new());
            size = 0;
        }
        size += n;
        chunks.last_mut().expect("non-empty").push(e);
    }
    chunks
}

/// Orders collected entries for application: by topic, then key, one entry
/// per key. Among copies of one key, the one chaining onto the previously
/// chosen key wins.
pub fn merge(entries: Vec<ChainedMessage>, heads: &BTreeMap<TopicName, OrderKey>) -> Vec<ChainedMessage> {
    let mut by_key: BTreeMap<(TopicName, OrderKey), Vec<ChainedMessage>> = BTreeMap::new();
    for e in entries {
        by_key.entry((e.message.topic.clone(), e.message.key)).or_default().push(e);
    }
    let mut out = Vec::with_capacity(by_key.len());
    let mut cursor: Option<(TopicName, OrderKey)> = None;
    for ((topic, key), mut copies) in by_key {
        let head = match &cursor {
            Some((t, k)) if *t == topic => *k,
            _ => heads.get(&topic).copied().unwrap_or(OrderKey::ZERO),
        };
        if key <= head {
            continue;
        }
        let pick = copies.iter().position(|c| c.prev == head).unwrap_or(0);
        out.push(copies.swap_remove(pick));
        cursor = Some((topic, key));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::MsgId;
    use crate::message::Message;

    fn cm(t: &str, e: u64, s: u64, prev: (u64, u64), payload: usize) -> ChainedMessage {
        ChainedMessage {
            message: Message::new(TopicName::new(t).unwrap(), OrderKey::new(e, s), vec![0u8; payload], MsgId(1)),
            prev: OrderKey::new(prev.0, prev.1),
        }
    }

    #[test]
    fn empty_response_is_one_empty_chunk() {
        assert_eq!(chunk_entries(Vec::new()), vec![Vec::new()]);
    }

    #[test]
    fn chunks_respect_budget_and_order() {
        let entries: Vec<_> = (1..=100).map(|s| cm("t", 1, s, (1, s - 1), 20_000)).collect();
        let chunks = chunk_entries(entries.clone());
        assert!(chunks.len() > 1);
        for c in &chunks {
            assert!(c.iter().map(encoded_len).sum::<usize>() <= CHUNK_BYTES);
        }
        assert_eq!(chunks.concat(), entries);
    }

    #[test]
    fn merge_unions_and_skips_known() {
        let a = vec![cm("t", 1, 1, (0, 0), 1), cm("t", 1, 2, (1, 1), 1)];
        let b = vec![cm("t", 1, 2, (1, 1), 1), cm("t", 1, 3, (1, 2), 1), cm("u", 2, 1, (0, 0), 1)];
        let heads = BTreeMap::from([(TopicName::new("t").unwrap(), OrderKey::new(1, 1))]);
        let merged = merge(a.into_iter().chain(b).collect(), &heads);
        let keys: Vec<_> = merged.iter().map(|c| (c.message.topic.as_str().to_owned(), c.message.key.seq)).collect();
        assert_eq!(keys, vec![("t".into(), 2), ("t".into(), 3), ("u".into(), 1)]);
    }

    #[test]
    fn merge_prefers_chaining_copy() {
        let broken = cm("t", 1, 5, (1, 3), 1);
        let intact = cm("t", 1, 5, (1, 4), 1);
        let heads = BTreeMap::from([(TopicName::new("t").unwrap(), OrderKey::new(1, 4))]);
        let merged = merge(vec![broken, intact.clone()], &heads);
        assert_eq!(merged, vec![intact]);
    }
}
