//! Sharding hashes. Every placement decision in the system (topic group,
//! I/O shard, worker shard) goes through 64-bit FNV-1a.

use crate::ids::{GroupId, TopicName};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Topic group of `topic` among `num_groups` groups.
///
/// # Panics
///
/// If `num_groups` is zero.
pub fn topic_group(topic: &TopicName, num_groups: u32) -> GroupId {
    assert!(num_groups >= 1, "num_groups must be at least 1");
    GroupId::from_raw((fnv1a64(topic.as_bytes()) % u64::from(num_groups)) as u32)
}

/// Shard in `[0, n_shards)` for a client address.
///
/// # Panics
///
/// If `n_shards` is zero.
pub fn client_shard(client_address: &str, n_shards: usize) -> usize {
    assert!(n_shards >= 1, "n_shards must be at least 1");
    (fnv1a64(client_address.as_bytes()) % n_shards as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Reference FNV-1a written against the published algorithm
    /// description, with explicit modular arithmetic in u128.
    fn oracle_fnv1a64(data: &[u8]) -> u64 {
        let mut hash: u128 = 14_695_981_039_346_656_037;
        for &byte in data {
            hash ^= byte as u128;
            hash = (hash * 1_099_511_628_211) % (1u128 << 64);
        }
        hash as u64
    }

    #[test]
    fn oracle_matches_published_vectors() {
        assert_eq!(oracle_fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(oracle_fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(oracle_fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn implementation_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let len = rng.gen_range(0..64);
            let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            assert_eq!(fnv1a64(&data), oracle_fnv1a64(&data));
        }
    }

    #[test]
    fn topic_group_examples() {
        let a = TopicName::new("a").unwrap();
        assert_eq!(topic_group(&a, 1).index(), 0);
        // oracle_fnv1a64("scores/soccer") = 3315249223815267612
        let t = TopicName::new("scores/soccer").unwrap();
        assert_eq!(oracle_fnv1a64(b"scores/soccer") % 100, 12);
        assert_eq!(topic_group(&t, 100).index(), 12);
    }

    #[test]
    fn topic_groups_spread_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0u32; 100];
        for _ in 0..10_000 {
            let len = rng.gen_range(4..24);
            let name: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let t = TopicName::new(&name).unwrap();
            counts[topic_group(&t, 100).index() as usize] += 1;
        }
        for (g, &c) in counts.iter().enumerate() {
            assert!((50..=150).contains(&c), "group {g} got {c}");
        }
    }

    #[test]
    fn client_shard_examples() {
        assert_eq!(client_shard("10.0.0.1:5000", 1), 0);
        assert_eq!(client_shard("anything", 1), 0);
        let a = client_shard("192.168.1.20:41000", 16);
        assert_eq!(a, client_shard("192.168.1.20:41000", 16));
        assert!(a < 16);
    }

    #[test]
    fn client_shards_spread_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0u32; 16];
        let mut seen = std::collections::HashSet::new();
        while seen.len() < 10_000 {
            let addr = format!(
                "{}.{}.{}.{}:{}",
                rng.gen_range(1..255),
                rng.gen_range(0..255),
                rng.gen_range(0..255),
                rng.gen_range(1..255),
                rng.gen_range(1024..65535)
            );
            if seen.insert(addr.clone()) {
                counts[client_shard(&addr, 16)] += 1;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            assert!(c >= 400, "shard {s} got {c}");
        }
    }
}
