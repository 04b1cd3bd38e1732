//! Load generators for migrant brokers.
//!
//! [`run_pub`] publishes at a fixed aggregate rate over one connection.
//! [`run`] opens many subscriber connections, optionally with a
//! co-located publisher, measures end-to-end latency from the timestamp
//! in each payload, samples broker CPU and traffic, and audits delivery.

pub mod audit;
pub mod cpu;
pub mod payload;
pub mod run;
pub mod stats;

pub use audit::{audit, AuditReport, PubRecord, SubRecord};
pub use run::{run, run_pub, topic_name, BenchConfig, BenchReport, BenchRun, PubConfig, PubReport, Sample};
pub use stats::{stats, LatencyStats};

/// Logging for the bench binaries, controlled by `RUST_LOG`.
pub fn init_logging() {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .try_init();
}
