use std::collections::VecDeque;
use std::sync::Arc;

use migrant_core::engine::{AppendOutcome, TopicCache};
use migrant_core::{Message, MsgId, OrderKey, TopicName};
use proptest::prelude::*;

fn m(topic: &TopicName, key: OrderKey) -> Arc<Message> {
    Arc::new(Message::new(topic.clone(), key, Vec::new(), MsgId(0)))
}

/// Keys a single topic's buffer must hold: the last `depth` accepted keys,
/// where a key is accepted iff it exceeds every key accepted before it.
fn model(keys: &[OrderKey], depth: usize) -> VecDeque<OrderKey> {
    let mut held = VecDeque::new();
    let mut max = OrderKey::ZERO;
    for &k in keys {
        if k > max {
            max = k;
            held.push_back(k);
            if held.len() > depth {
                held.pop_front();
            }
        }
    }
    held
}

fn arb_keys() -> impl Strategy<Value = Vec<OrderKey>> {
    prop::collection::vec((1u64..4, 1u64..30).prop_map(|(e, s)| OrderKey::new(e, s)), 0..80)
}

proptest! {
    #[test]
    fn buffer_matches_model(keys in arb_keys(), depth in 1usize..12) {
        let t = TopicName::new("t").unwrap();
        let cache = TopicCache::new(4, depth);
        for &k in &keys {
            let before = cache.head(&t);
            match cache.append(m(&t, k)) {
                AppendOutcome::Appended { .. } => prop_assert!(k > before),
                AppendOutcome::Duplicate => prop_assert!(cache.contains(&t, k)),
                AppendOutcome::OutOfOrder { last } => prop_assert!(k <= last),
            }
        }
        let got: Vec<OrderKey> = cache.snapshot().remove(&t).unwrap_or_default();
        prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(got.len() <= depth);
        prop_assert_eq!(got, Vec::from(model(&keys, depth)));
    }

    #[test]
    fn read_after_is_the_suffix(n in 0u64..40, depth in 1usize..12, after in 0u64..45) {
        let t = TopicName::new("t").unwrap();
        let cache = TopicCache::new(1, depth);
        let sorted: Vec<OrderKey> = (1..=n).map(|s| OrderKey::new(1, s)).collect();
        for &k in &sorted {
            cache.append(m(&t, k));
        }
        let after = if after == 0 { OrderKey::ZERO } else { OrderKey::new(1, after) };
        let held = model(&sorted, depth);
        let read = cache.read_after(&t, after);
        let got: Vec<OrderKey> = read.messages.iter().map(|x| x.key).collect();
        let want: Vec<OrderKey> = held.iter().copied().filter(|k| *k > after).collect();
        prop_assert_eq!(got, want);
        // truncated iff something newer than `after` was evicted
        let evicted_newer = sorted.iter().any(|k| *k > after && !held.contains(k));
        prop_assert_eq!(read.truncated, evicted_newer);
    }
}
