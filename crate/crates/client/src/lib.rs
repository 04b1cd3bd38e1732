//! Async client for migrant brokers.
//!
//! [`Client`] runs the SDK state machine on a tokio task and exposes it as
//! futures and an event stream:
//!
//! ```no_run
//! # async fn demo() -> anyhow::Result<()> {
//! use migrant_client::{Client, ClientConfig, Event, ServerList};
//!
//! let servers = ServerList::parse("127.0.0.1:7001,127.0.0.1:7002=2")?;
//! let mut client = Client::connect(ClientConfig::new(servers));
//! client.subscribe("prices/eur")?;
//! let key = client.publish("prices/eur", "1.0842").await?;
//! while let Some(event) = client.next_event().await {
//!     if let Event::Message(m) = event {
//!         println!("{} {} {:?}", m.topic, m.key, m.payload);
//!     }
//! }
//! # Ok(()) }
//! ```
//!
//! [`AdminClient`] talks to the broker's HTTP admin API.

mod admin;
mod driver;

use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};

use bytes::Bytes;
use migrant_core::{MsgId, OrderKey, TopicName};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};

pub use admin::{AdminClient, AdminError, ServerStats};
pub use migrant_core::client::{ClientConfig, ClientStats, ClientError, ReconnectMode, ReconnectPolicy, ServerList};
pub use migrant_core::Message;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topic: {0}")]
    Topic(#[from] migrant_core::IdError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("client stopped")]
    Stopped,
}

/// What the application observes, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Message(Message),
    /// Messages of the topic may have been missed while disconnected.
    Truncated { topic: TopicName },
    Connected { address: String },
    Disconnected { address: String },
}

pub(crate) enum Command {
    Subscribe(TopicName),
    Publish { topic: TopicName, payload: Bytes, ack: bool, reply: oneshot::Sender<Result<Published, ClientError>> },
    Stats(oneshot::Sender<ClientStats>),
    Close(oneshot::Sender<()>),
}

/// Result of a publication: the id always, the key once acknowledged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Published {
    pub msg_id: MsgId,
    pub key: Option<OrderKey>,
}

/// Handle to one SDK instance. Dropping it stops the instance.
pub struct Client {
    handle: ClientHandle,
    events: mpsc::UnboundedReceiver<Event>,
}

static SEEDS: AtomicU64 = AtomicU64::new(0);

/// Distinct per instance in this process, and across processes.
fn fresh_seed() -> u64 {
    let wall = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64);
    let n = SEEDS.fetch_add(1, Ordering::Relaxed);
    wall ^ u64::from(std::process::id()).rotate_left(40) ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Client {
    /// Starts the instance on the current tokio runtime. It dials in the
    /// background; commands issued before the connection is up are queued.
    /// A zero `cfg.seed` is replaced by a fresh one.
    pub fn connect(mut cfg: ClientConfig) -> Client {
        if cfg.seed == 0 {
            cfg.seed = fresh_seed();
        }
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let (ev_tx, ev_rx) = mpsc::unbounded_channel();
        tokio::spawn(driver::run(cfg, cmd_rx, ev_tx));
        Client { handle: ClientHandle { cmds: cmd_tx }, events: ev_rx }
    }

    pub fn subscribe(&self, topic: &str) -> Result<(), Error> {
        self.handle.subscribe(topic)
    }

    /// Publishes and waits for the PUBACK, re-sending as needed.
    pub async fn publish(&self, topic: &str, payload: impl Into<Bytes>) -> Result<OrderKey, Error> {
        let p = self.handle.publish_queued(topic, payload, true)?.await?;
        Ok(p.key.expect("acknowledged publications carry a key"))
    }

    /// Publishes without waiting for acknowledgement (at most once).
    pub async fn publish_unacked(&self, topic: &str, payload: impl Into<Bytes>) -> Result<MsgId, Error> {
        Ok(self.handle.publish_queued(topic, payload, false)?.await?.msg_id)
    }

    /// See [`ClientHandle::publish_queued`].
    pub fn publish_queued(
        &self,
        topic: &str,
        payload: impl Into<Bytes>,
        ack: bool,
    ) -> Result<impl Future<Output = Result<Published, Error>>, Error> {
        self.handle.publish_queued(topic, payload, ack)
    }

    /// Next event, or `None` once the instance stopped.
    pub async fn next_event(&mut self) -> Option<Event> {
        self.events.recv().await
    }

    pub fn try_next_event(&mut self) -> Option<Event> {
        self.events.try_recv().ok()
    }

    pub async fn stats(&self) -> Result<ClientStats, Error> {
        self.handle.stats().await
    }

    /// Closes the connection and stops the instance.
    pub async fn close(self) {
        self.handle.close().await
    }

    /// Splits into a command handle and the event stream.
    pub fn split(self) -> (ClientHandle, mpsc::UnboundedReceiver<Event>) {
        (self.handle, self.events)
    }
}

/// The command half of a [`Client`]. Clones drive the same instance.
#[derive(Clone)]
pub struct ClientHandle {
    cmds: mpsc::UnboundedSender<Command>,
}

impl ClientHandle {
    pub fn subscribe(&self, topic: &str) -> Result<(), Error> {
        let topic = TopicName::new(topic)?;
        self.cmds.send(Command::Subscribe(topic)).map_err(|_| Error::Stopped)
    }

    /// Queues a publication and returns a future for its outcome, so many
    /// publications can be in flight at once. The publication is queued
    /// even if the future is dropped.
    pub fn publish_queued(
        &self,
        topic: &str,
        payload: impl Into<Bytes>,
        ack: bool,
    ) -> Result<impl Future<Output = Result<Published, Error>>, Error> {
        let topic = TopicName::new(topic)?;
        let (tx, rx) = oneshot::channel();
        self.cmds
            .send(Command::Publish { topic, payload: payload.into(), ack, reply: tx })
            .map_err(|_| Error::Stopped)?;
        Ok(async move { rx.await.map_err(|_| Error::Stopped)?.map_err(Error::from) })
    }

    pub async fn stats(&self) -> Result<ClientStats, Error> {
        let (tx, rx) = oneshot::channel();
        self.cmds.send(Command::Stats(tx)).map_err(|_| Error::Stopped)?;
        rx.await.map_err(|_| Error::Stopped)
    }

    pub async fn close(self) {
        let (tx, rx) = oneshot::channel();
        if self.cmds.send(Command::Close(tx)).is_ok() {
            let _ = rx.await;
        }
    }
}
