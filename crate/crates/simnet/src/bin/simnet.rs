use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use migrant_simnet::{run, sweep, Scenario};

#[derive(Parser)]
#[command(name = "simnet", about = "Deterministic simulator for migrant clusters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario with one seed.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the whole trace.
        #[arg(long)]
        trace: bool,
    },
    /// Run one scenario over a range of seeds, e.g. `1..100` (inclusive).
    Sweep {
        scenario: PathBuf,
        #[arg(long, default_value = "1..100")]
        seeds: String,
    },
}

fn load(path: &PathBuf) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse().with_context(|| format!("parsing {}", path.display()))
}

fn seed_range(s: &str) -> Result<std::ops::RangeInclusive<u64>> {
    let Some((a, b)) = s.split_once("..") else { bail!("seed range must look like 1..100") };
    let a: u64 = a.trim().parse().context("range start")?;
    let b: u64 = b.trim().trim_start_matches('=').parse().context("range end")?;
    if a > b {
        bail!("empty seed range {s}");
    }
    Ok(a..=b)
}

fn main() -> Result<ExitCode> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, seed, trace } => {
            let mut sc = load(&scenario)?;
            if let Some(s) = seed {
                sc = sc.with_seed(s);
            }
            let r = run(&sc);
            if trace {
                for e in r.trace.entries() {
                    println!("{e}");
                }
            }
            println!(
                "{} seed={} ended={:?} entries={} hash={:016x} events={}",
                r.name,
                r.seed,
                r.ended_at,
                r.trace.len(),
                r.trace_hash,
                r.stats.events
            );
            println!("{}", r.outcome);
            Ok(if r.outcome.is_pass() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Sweep { scenario, seeds } => {
            let sc = load(&scenario)?;
            let report = sweep(&sc, seed_range(&seeds)?, |r| {
                let verdict = if r.outcome.is_pass() { "pass" } else { "FAIL" };
                println!("seed {:>5} {verdict} ended={:?} hash={:016x}", r.seed, r.ended_at, r.trace_hash);
            });
            for (seed, outcome) in &report.failures {
                println!("seed {seed}: {outcome}");
            }
            println!("{}/{} seeds passed", report.runs - report.failures.len(), report.runs);
            Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
