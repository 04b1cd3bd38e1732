use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use migrant_server::{start, ServerConfig, StartOptions};

#[derive(Parser)]
#[command(name = "migrant-server", about = "Clustered topic-based publish/subscribe broker")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    node_id: Option<u16>,
    #[arg(long)]
    listen: Option<SocketAddr>,
    #[arg(long)]
    admin: Option<SocketAddr>,
    /// Every member, e.g. `1@127.0.0.1:7001,2@127.0.0.1:7002`.
    #[arg(long)]
    peers: Option<String>,
    /// Rebuild the cache from the other members before serving clients.
    #[arg(long)]
    rejoin: bool,
}

fn config(cli: &Cli) -> Result<ServerConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ServerConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ServerConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    if let Some(id) = cli.node_id {
        overrides.push(("node_id".into(), id.to_string()));
    }
    if let Some(a) = cli.listen {
        overrides.push(("listen_address".into(), a.to_string()));
    }
    if let Some(a) = cli.admin {
        overrides.push(("admin_address".into(), a.to_string()));
    }
    if let Some(p) = &cli.peers {
        overrides.push(("peers".into(), p.clone()));
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        overrides.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in overrides {
        cfg.set(&k, &v).map_err(anyhow::Error::msg)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

async fn terminated() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(s) => s,
            Err(_) => {
                let _ = ctrl_c.await;
                return;
            }
        };
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = ctrl_c.await;
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    let cfg = config(&cli)?;
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build()?;
    rt.block_on(async {
        let server = start(cfg, StartOptions { rejoin: cli.rejoin }).await?;
        println!("listening on {}", server.local_addr());
        if let Some(a) = server.admin_addr() {
            println!("admin on http://{a}");
        }
        terminated().await;
        tracing::info!("shutting down");
        server.shutdown().await;
        Ok(())
    })
}
