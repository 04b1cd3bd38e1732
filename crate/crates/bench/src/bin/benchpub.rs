use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use migrant_bench::{run_pub, PubConfig};
use migrant_client::ServerList;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Report {
    Json,
    Text,
}

/// Publishes to a set of topics at a fixed rate over one connection.
#[derive(Debug, Parser)]
struct Args {
    /// Comma-separated `host:port[=weight]` list.
    #[arg(long)]
    servers: String,
    #[arg(long, default_value_t = 100)]
    topics: usize,
    /// Messages per second per topic.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,
    /// Payload size in bytes, timestamp included.
    #[arg(long, default_value_t = migrant_bench::payload::DEFAULT_SIZE)]
    payload: usize,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "60s")]
    duration: Duration,
    #[arg(long, value_enum, default_value = "json")]
    report: Report,
    /// Topic name prefix.
    #[arg(long, default_value = "bench/")]
    prefix: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Writes every acknowledged publication as a JSON line, for auditing
    /// with `benchsub --audit-log`.
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
            eprintln!("benchpub: bad --servers: {e}");
            return ExitCode::from(2);
        }
    };
    let mut cfg = PubConfig::new(servers);
    cfg.topics = args.topics;
    cfg.rate = args.rate;
    cfg.payload = args.payload;
    cfg.duration = args.duration;
    cfg.prefix = args.prefix;
    cfg.seed = args.seed;
    let report = match run_pub(cfg).await {
        Ok(r) => r,
        Err(e) => {
            eprintln!("benchpub: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(path) = &args.audit_log {
        if let Err(e) = write_log(path, &report.log) {
            eprintln!("benchpub: writing {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
    }
    match args.report {
        Report::Json => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
        Report::Text => println!(
            "sent {} acked {} failed {} unresolved {} in {:.1}s ({:.1}/s)",
            report.sent, report.acked, report.failed, report.unresolved, report.elapsed_s, report.rate
        ),
    }
    if report.failed + report.unresolved > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn write_log(path: &PathBuf, log: &[migrant_bench::PubRecord]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in log {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}
