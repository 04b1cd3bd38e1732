//! CPU usage of a process from `/proc/<pid>/stat`.

use std::time::{Duration, Instant};

/// Kernel clock ticks per second as reported in `/proc` (`USER_HZ`).
const USER_HZ: f64 = 100.0;

/// User plus system time consumed so far by `pid`.
pub fn cpu_time(pid: u32) -> Option<Duration> {
    let text = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // the command name may contain spaces; fields resume after its ')'
    let rest = &text[text.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // fields 14 and 15 of the full line: utime, stime
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(Duration::from_secs_f64((utime + stime) as f64 / USER_HZ))
}

/// Samples a process once per second; reports the mean of the samples.
#[derive(Debug)]
pub struct CpuSampler {
    pid: u32,
    last: Option<(Instant, Duration)>,
    samples: Vec<f64>,
}

impl CpuSampler {
    pub fn new(pid: u32) -> Self {
        Self { pid, last: None, samples: Vec::new() }
    }

    /// Takes one reading; the first reading only sets the baseline.
    pub fn sample(&mut self) {
        let Some(cpu) = cpu_time(self.pid) else { return };
        let now = Instant::now();
        if let Some((t, c)) = self.last {
            let wall = now.duration_since(t).as_secs_f64();
            if wall > 0.0 {
                self.samples.push(100.0 * cpu.saturating_sub(c).as_secs_f64() / wall);
            }
        }
        self.last = Some((now, cpu));
    }

    /// Mean CPU% over the samples so far, 100 meaning one full core.
    pub fn mean(&self) -> Option<f64> {
        (!self.samples.is_empty()).then(|| self.samples.iter().sum::<f64>() / self.samples.len() as f64)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }
}
