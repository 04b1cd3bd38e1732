use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use migrant_client::{AdminClient, Client, ClientConfig, Event, ServerList};
use migrant_core::OrderKey;

#[derive(Parser)]
#[command(name = "migrant", about = "Publish, subscribe and administer migrant brokers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Publish messages over the binary protocol.
    Publish {
        /// Broker list, e.g. `127.0.0.1:7001,127.0.0.1:7002=2`.
        #[arg(long, default_value = "127.0.0.1:7001")]
        servers: String,
        topic: String,
        payload: String,
        /// Times to publish the payload.
        #[arg(long, default_value_t = 1)]
        count: u32,
        /// Fire and forget.
        #[arg(long)]
        no_ack: bool,
    },
    /// Print notifications of one or more topics.
    Subscribe {
        #[arg(long, default_value = "127.0.0.1:7001")]
        servers: String,
        #[arg(required = true)]
        topics: Vec<String>,
        /// Stop after this many messages.
        #[arg(long)]
        count: Option<u64>,
        /// Stop after this long, e.g. `30s`.
        #[arg(long)]
        duration: Option<humantime::Duration>,
    },
    /// Query the HTTP admin API.
    Admin {
        #[arg(long, default_value = "http://127.0.0.1:8001")]
        url: String,
        #[command(subcommand)]
        what: AdminCmd,
    },
}

#[derive(Subcommand)]
enum AdminCmd {
    Health,
    Stats,
    Cluster,
    /// Cached messages of a topic.
    History {
        topic: String,
        /// Only messages after this key, `epoch.seq`.
        #[arg(long)]
        after: Option<OrderKey>,
    },
    /// Publish through the admin API.
    Publish { topic: String, payload: String },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

#[tokio::main(flavor = "current_thread")]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    match Cli::parse().cmd {
        Cmd::Publish { servers, topic, payload, count, no_ack } => {
            let client = Client::connect(ClientConfig::new(ServerList::parse(&servers)?));
            for _ in 0..count {
                if no_ack {
                    let id = client.publish_unacked(&topic, payload.clone()).await?;
                    println!("sent {id}");
                } else {
                    let key = client.publish(&topic, payload.clone()).await?;
                    println!("acked {}.{}", key.epoch, key.seq);
                }
            }
            client.close().await;
        }
        Cmd::Subscribe { servers, topics, count, duration } => {
            let mut client = Client::connect(ClientConfig::new(ServerList::parse(&servers)?));
            for t in &topics {
                client.subscribe(t)?;
            }
            let stop = duration.map(|d| tokio::time::Instant::now() + Duration::from(d));
            let mut seen = 0u64;
            loop {
                let ev = match stop {
                    Some(at) => match tokio::time::timeout_at(at, client.next_event()).await {
                        Ok(ev) => ev,
                        Err(_) => break,
                    },
                    None => client.next_event().await,
                };
                match ev.context("client stopped")? {
                    Event::Message(m) => {
                        println!("{} {}.{} {}", m.topic, m.key.epoch, m.key.seq, String::from_utf8_lossy(&m.payload));
                        seen += 1;
                        if count.is_some_and(|c| seen >= c) {
                            break;
                        }
                    }
                    Event::Truncated { topic } => eprintln!("warning: messages of {topic} may have been missed"),
                    Event::Connected { address } => eprintln!("connected to {address}"),
                    Event::Disconnected { address } => eprintln!("disconnected from {address}"),
                }
            }
            client.close().await;
        }
        Cmd::Admin { url, what } => {
            let admin = AdminClient::new(url);
            match what {
                AdminCmd::Health => print_json(&admin.health().await?)?,
                AdminCmd::Stats => print_json(&admin.stats().await?)?,
                AdminCmd::Cluster => print_json(&admin.cluster().await?)?,
                AdminCmd::History { topic, after } => print_json(&admin.history(&topic, after).await?)?,
                AdminCmd::Publish { topic, payload } => {
                    if payload.len() > migrant_core::message::MAX_PAYLOAD {
                        bail!("payload too large");
                    }
                    print_json(&admin.publish(&topic, &payload).await?)?
                }
            }
        }
    }
    Ok(())
}
