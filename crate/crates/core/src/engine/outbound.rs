use std::sync::atomic::{AtomicUsize, Ordering};

/// Byte budget for one connection's outbound queue. The writer reserves
/// before queueing and releases after the socket accepted the bytes; a
/// failed reservation marks the client as a slow consumer.
#[derive(Debug)]
pub struct OutboundBudget {
    cap: usize,
    queued: AtomicUsize,
}

impl OutboundBudget {
    pub fn new(cap: usize) -> Self {
        Self { cap, queued: AtomicUsize::new(0) }
    }

    pub fn try_reserve(&self, n: usize) -> bool {
        self.queued
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |q| {
                let next = q.checked_add(n)?;
                (next <= self.cap).then_some(next)
            })
            .is_ok()
    }

    pub fn release(&self, n: usize) {
        let _ = self.queued.fetch_update(Ordering::AcqRel, Ordering::Acquire, |q| Some(q.saturating_sub(n)));
    }

    pub fn queued(&self) -> usize {
        self.queued.load(Ordering::Acquire)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_caps_and_releases() {
        let b = OutboundBudget::new(100);
        assert!(b.try_reserve(60));
        assert!(!b.try_reserve(41));
        assert_eq!(b.queued(), 60);
        b.release(60);
        assert!(b.try_reserve(100));
    }
}
