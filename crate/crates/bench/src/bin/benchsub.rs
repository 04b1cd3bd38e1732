use std::io::BufRead;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use migrant_bench::{run, BenchConfig, PubRecord};
use migrant_client::ServerList;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Report {
    Json,
    Text,
}

/// Opens many subscriber connections, each on one random topic, and
/// reports end-to-end latency.
#[derive(Debug, Parser)]
struct Args {
    /// Comma-separated `host:port[=weight]` list.
    #[arg(long)]
    servers: String,
    #[arg(long, default_value_t = 1000)]
    connections: usize,
    #[arg(long, default_value_t = 100)]
    topics: usize,
    /// Messages per second per topic from a co-located publisher; 0 when
    /// benchpub runs separately.
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    #[arg(long, default_value_t = migrant_bench::payload::DEFAULT_SIZE)]
    payload: usize,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "60s")]
    duration: Duration,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "15s")]
    warmup: Duration,
    #[arg(long, value_enum, default_value = "json")]
    report: Report,
    #[arg(long, default_value = "bench/")]
    prefix: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Broker process to sample for CPU%; repeatable.
    #[arg(long = "broker-pid")]
    broker_pids: Vec<u32>,
    /// Broker admin URL for traffic counters; repeatable.
    #[arg(long)]
    admin: Vec<String>,
    /// Publication log written by `benchpub --audit-log`, read after the
    /// run to audit delivery.
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    migrant_bench::init_logging();
    let args = Args::parse();
    let servers = match ServerList::parse(&args.servers) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("benchsub: bad --servers: {e}");
            return ExitCode::from(2);
        }
    };
    let mut cfg = BenchConfig::new(servers);
    cfg.connections = args.connections;
    cfg.topics = args.topics;
    cfg.rate = args.rate;
    cfg.payload = args.payload;
    cfg.duration = args.duration;
    cfg.warmup = args.warmup;
    cfg.prefix = args.prefix;
    cfg.seed = args.seed;
    cfg.broker_pids = args.broker_pids;
    cfg.admin = args.admin;
    let mut result = match run(&cfg).await {
        Ok(r) => r,
        Err(e) => {
            eprintln!("benchsub: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(path) = &args.audit_log {
        match wait_for_log(path).await {
            Ok(log) => result.audit_against(&log),
            Err(e) => eprintln!("benchsub: reading {}: {e:#}", path.display()),
        }
    }
    let report = &result.report;
    match args.report {
        Report::Json => println!("{}", serde_json::to_string_pretty(report).expect("report serializes")),
        Report::Text => {
            let l = &report.latency_ms;
            let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.2}"));
            println!(
                "connections {}/{} received {} latency ms: mean {} median {} p90 {} p95 {} p99 {} max {}",
                report.connections.connected,
                report.connections.requested,
                report.received,
                f(l.mean),
                f(l.median),
                f(l.p90),
                f(l.p95),
                f(l.p99),
                f(l.max)
            );
            if let Some(c) = report.cpu_percent {
                println!("broker cpu {c:.1}%");
            }
            if let Some(g) = report.gbps {
                println!("broker out {g:.4} Gbps");
            }
            println!(
                "audit: expected {} missing {} duplicates {} out of order {}",
                report.audit.expected, report.audit.missing, report.audit.duplicates, report.audit.out_of_order
            );
        }
    }
    ExitCode::SUCCESS
}

/// The publisher writes its log when it exits, possibly after us.
async fn wait_for_log(path: &PathBuf) -> anyhow::Result<Vec<PubRecord>> {
    let deadline = tokio::time::Instant::now() + Duration::from_secs(120);
    let mut last_len = None;
    loop {
        let len = std::fs::metadata(path).ok().map(|m| m.len());
        if len.is_some() && len == last_len {
            return read_log(path);
        }
        if tokio::time::Instant::now() >= deadline {
            anyhow::bail!("no publication log after 120s");
        }
        last_len = len;
        tokio::time::sleep(Duration::from_secs(1)).await;
    }
}

fn read_log(path: &PathBuf) -> anyhow::Result<Vec<PubRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut v = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            v.push(serde_json::from_str(&line)?);
        }
    }
    Ok(v)
}
