use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use super::EngineError;
use crate::hash::client_shard;
use crate::ids::ConnectionId;

/// Placement of a connection, fixed for its lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub conn: ConnectionId,
    pub io_shard: usize,
    pub worker: usize,
}

/// Admits connections and pins them to shards by address hash.
#[derive(Debug)]
pub struct Acceptor {
    n_io: usize,
    n_workers: usize,
    max_connections: usize,
    next_id: AtomicU64,
    live: AtomicUsize,
}

impl Acceptor {
    pub fn new(n_io: usize, n_workers: usize, max_connections: usize) -> Self {
        assert!(n_io >= 1 && n_workers >= 1);
        Self { n_io, n_workers, max_connections, next_id: AtomicU64::new(1), live: AtomicUsize::new(0) }
    }

    pub fn accept(&self, address: &str) -> Result<Assignment, EngineError> {
        let admitted = self
            .live
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| (n < self.max_connections).then_some(n + 1));
        if admitted.is_err() {
            return Err(EngineError::ConnectionLimitReached(self.max_connections));
        }
        Ok(Assignment {
            conn: ConnectionId(self.next_id.fetch_add(1, Ordering::Relaxed)),
            io_shard: client_shard(address, self.n_io),
            worker: client_shard(address, self.n_workers),
        })
    }

    /// Frees the slot of a closed connection.
    pub fn release(&self) {
        let _ = self.live.fetch_update(Ordering::AcqRel, Ordering::Acquire, |n| n.checked_sub(1));
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::Acquire)
    }

    pub fn workers(&self) -> usize {
        self.n_workers
    }

    pub fn io_shards(&self) -> usize {
        self.n_io
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_io_shard() {
        let a = Acceptor::new(1, 1, 100);
        for i in 0..50 {
            assert_eq!(a.accept(&format!("10.0.0.{i}:1000")).unwrap().io_shard, 0);
        }
    }

    #[test]
    fn reconnect_maps_to_same_shards() {
        let a = Acceptor::new(8, 4, 100);
        let x = a.accept("172.16.0.9:50000").unwrap();
        let y = a.accept("172.16.0.9:50000").unwrap();
        assert_ne!(x.conn, y.conn);
        assert_eq!((x.io_shard, x.worker), (y.io_shard, y.worker));
    }

    #[test]
    fn limit_enforced_and_released() {
        let a = Acceptor::new(1, 1, 2);
        a.accept("a").unwrap();
        a.accept("b").unwrap();
        assert_eq!(a.accept("c"), Err(EngineError::ConnectionLimitReached(2)));
        a.release();
        assert!(a.accept("c").is_ok());
    }

    #[test]
    fn io_shards_balanced() {
        let a = Acceptor::new(8, 8, usize::MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 8];
        for i in 0..10_000u32 {
            let addr = format!("10.{}.{}.{}:{}", rng.gen_range(0..255), rng.gen_range(0..255), i % 250, rng.gen_range(1024..65535));
            counts[a.accept(&addr).unwrap().io_shard] += 1;
        }
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!(max / min < 1.5, "{counts:?}");
    }
}
