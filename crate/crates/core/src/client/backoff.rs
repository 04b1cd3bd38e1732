use std::time::Duration;

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconnectMode {
    /// Uniform wait in `[min, max]` before every attempt.
    RandomWait { min: Duration, max: Duration },
    /// `base * 2^attempt`, capped.
    TruncatedExpBackoff { base: Duration, cap: Duration },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconnectPolicy {
    pub mode: ReconnectMode,
    /// Scale each delay by a uniform factor in `[0.5, 1.5]`.
    pub jitter: bool,
    pub blacklist_ttl: Duration,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        Self {
            mode: ReconnectMode::TruncatedExpBackoff { base: Duration::from_secs(1), cap: Duration::from_secs(32) },
            jitter: true,
            blacklist_ttl: Duration::from_secs(30),
        }
    }
}

impl ReconnectPolicy {
    /// Delay before attempt `attempt` (0-based), before jitter. Never above
    /// the cap.
    pub fn nominal<R: Rng + ?Sized>(&self, attempt: u32, rng: &mut R) -> Duration {
        match self.mode {
            ReconnectMode::RandomWait { min, max } => {
                if max <= min {
                    min
                } else {
                    Duration::from_micros(rng.gen_range(min.as_micros() as u64..=max.as_micros() as u64))
                }
            }
            ReconnectMode::TruncatedExpBackoff { base, cap } => {
                let factor = 1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX);
                base.checked_mul(factor).unwrap_or(cap).min(cap)
            }
        }
    }

    pub fn delay<R: Rng + ?Sized>(&self, attempt: u32, rng: &mut R) -> Duration {
        let nominal = self.nominal(attempt, rng);
        if self.jitter {
            nominal.mul_f64(rng.gen_range(0.5..=1.5))
        } else {
            nominal
        }
    }
}
