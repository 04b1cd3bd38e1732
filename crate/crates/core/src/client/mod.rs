//! Publisher/subscriber SDK state machine.
//!
//! [`ClientCore`] owns everything a client decides: which server to dial,
//! when to reconnect, what to resubscribe from, which publications to send
//! again and which notifications reach the application. The caller owns the
//! transport: it performs the [`ClientAction`]s and reports transport events
//! back. Callbacks are produced in order from a single thread.

mod backoff;
mod dedupe;
mod select;

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use bytes::Bytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tracing::debug;

pub use backoff::{ReconnectMode, ReconnectPolicy};
pub use dedupe::{DedupeBuffer, ResumeState};
pub use select::{pick_server, Blacklist, ServerList};

use crate::ids::{MsgId, OrderKey, TopicName};
use crate::message::Message;
use crate::wire::{CloseReason, Frame, NackReason, Publish, Role};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("server list is empty")]
    EmptyServerList,
    #[error("server {address} has invalid weight {weight}")]
    InvalidWeight { address: String, weight: f64 },
    #[error("all servers blacklisted until {retry_at:?}")]
    AllServersBlacklisted { retry_at: Duration },
    #[error("publication not acknowledged after {attempts} attempts (last: {last:?})")]
    RetryBudgetExhausted { attempts: u32, last: Option<NackReason> },
    #[error("payload of {0} bytes exceeds the limit")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub servers: ServerList,
    pub reconnect: ReconnectPolicy,
    pub ping_interval: Duration,
    /// Unanswered pings before the connection is declared dead.
    pub missed_pongs: u32,
    pub dedupe_window: usize,
    /// Wait for a PUBACK or PUBNACK before sending again.
    pub publish_timeout: Duration,
    /// Sends of one publication before giving up.
    pub publish_attempts: u32,
    /// Pause before re-sending after a PUBNACK.
    pub nack_retry: Duration,
    pub connect_timeout: Duration,
    pub seed: u64,
}

impl ClientConfig {
    pub fn new(servers: ServerList) -> Self {
        Self {
            servers,
            reconnect: ReconnectPolicy::default(),
            ping_interval: Duration::from_secs(5),
            missed_pongs: 2,
            dedupe_window: 1024,
            publish_timeout: Duration::from_secs(3),
            publish_attempts: 30,
            nack_retry: Duration::from_millis(250),
            connect_timeout: Duration::from_secs(5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PublishOutcome {
    Acked(OrderKey),
    Failed(ClientError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientAction {
    /// Open a transport to `address`, then report
    /// [`ClientCore::on_transport_up`] or [`ClientCore::on_transport_down`].
    Connect { address: String },
    Send(Frame),
    /// Close the current transport. No transport-down report is expected.
    Disconnect,
    /// Application callback for one notification.
    Message(Message),
    Published { msg_id: MsgId, outcome: PublishOutcome },
    /// Messages of `topic` may have been missed: the history needed to
    /// resume was no longer available.
    Truncated { topic: TopicName },
    Connected { address: String },
    Disconnected { address: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub delivered: u64,
    pub duplicates: u64,
    pub out_of_order: u64,
    pub connects: u64,
    pub disconnects: u64,
    pub truncated: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Conn {
    Waiting { until: Duration },
    Dialing { address: String, since: Duration },
    Handshaking { address: String, since: Duration },
    Up { address: String, last_rx: Duration, next_ping: Duration },
}

#[derive(Debug)]
struct Outstanding {
    publish: Publish,
    attempts: u32,
    /// When to send again: after a timeout or a PUBNACK pause.
    resend_at: Option<Duration>,
    last_nack: Option<NackReason>,
}

pub struct ClientCore {
    cfg: ClientConfig,
    rng: ChaCha8Rng,
    conn: Conn,
    failures: u32,
    blacklist: Blacklist,
    resume: ResumeState,
    dedupe: DedupeBuffer,
    outstanding: BTreeMap<MsgId, Outstanding>,
    actions: VecDeque<ClientAction>,
    stats: ClientStats,
}

impl ClientCore {
    pub fn new(cfg: ClientConfig, now: Duration) -> Self {
        let mut c = Self::idle(cfg);
        c.start(now);
        c
    }

    /// A client that does not dial until [`Self::start`].
    pub fn idle(cfg: ClientConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dedupe = DedupeBuffer::new(cfg.dedupe_window.max(1));
        Self {
            cfg,
            rng,
            conn: Conn::Waiting { until: Duration::MAX },
            failures: 0,
            blacklist: Blacklist::default(),
            resume: ResumeState::default(),
            dedupe,
            outstanding: BTreeMap::new(),
            actions: VecDeque::new(),
            stats: ClientStats::default(),
        }
    }

    pub fn start(&mut self, now: Duration) {
        if self.conn == (Conn::Waiting { until: Duration::MAX }) {
            self.conn = Conn::Waiting { until: now };
            self.tick(now);
        }
    }

    pub fn stats(&self) -> ClientStats {
        self.stats
    }

    pub fn resume_state(&self) -> &ResumeState {
        &self.resume
    }

    pub fn is_connected(&self) -> bool {
        matches!(self.conn, Conn::Up { .. })
    }

    pub fn server(&self) -> Option<&str> {
        match &self.conn {
            Conn::Up { address, .. } => Some(address),
            _ => None,
        }
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn poll_action(&mut self) -> Option<ClientAction> {
        self.actions.pop_front()
    }

    pub fn drain_actions(&mut self) -> impl Iterator<Item = ClientAction> + '_ {
        self.actions.drain(..)
    }

    pub fn subscribe(&mut self, topic: TopicName) {
        if self.resume.get(&topic).is_some() {
            return;
        }
        self.resume.track(topic.clone());
        if self.is_connected() {
            self.actions.push_back(ClientAction::Send(Frame::Subscribe { topic, resume: OrderKey::ZERO }));
        }
    }

    /// Sends a publication. With `require_ack` it is re-sent under the same
    /// id until acknowledged or the attempt budget runs out.
    pub fn publish(&mut self, now: Duration, topic: TopicName, payload: Bytes, require_ack: bool) -> Result<MsgId, ClientError> {
        if payload.len() > crate::message::MAX_PAYLOAD {
            return Err(ClientError::PayloadTooLarge(payload.len()));
        }
        let msg_id = MsgId::random(&mut self.rng);
        let publish = Publish { topic, msg_id, ack_requested: require_ack, payload };
        if !require_ack {
            if self.is_connected() {
                self.actions.push_back(ClientAction::Send(Frame::Publish(publish)));
            }
            return Ok(msg_id);
        }
        self.outstanding.insert(msg_id, Outstanding { publish, attempts: 0, resend_at: None, last_nack: None });
        if self.is_connected() {
            self.send_publish(now, msg_id);
        }
        Ok(msg_id)
    }

    fn send_publish(&mut self, now: Duration, msg_id: MsgId) {
        let Some(o) = self.outstanding.get_mut(&msg_id) else { return };
        if o.attempts >= self.cfg.publish_attempts {
            let attempts = o.attempts;
            let last = o.last_nack;
            self.outstanding.remove(&msg_id);
            self.actions.push_back(ClientAction::Published {
                msg_id,
                outcome: PublishOutcome::Failed(ClientError::RetryBudgetExhausted { attempts, last }),
            });
            return;
        }
        o.attempts += 1;
        o.resend_at = Some(now + self.cfg.publish_timeout);
        self.actions.push_back(ClientAction::Send(Frame::Publish(o.publish.clone())));
    }

    pub fn next_deadline(&self) -> Duration {
        let conn = match &self.conn {
            Conn::Waiting { until } => *until,
            Conn::Dialing { since, .. } | Conn::Handshaking { since, .. } => *since + self.cfg.connect_timeout,
            Conn::Up { next_ping, last_rx, .. } => {
                (*next_ping).min(*last_rx + self.cfg.ping_interval * (self.cfg.missed_pongs + 1))
            }
        };
        if !self.is_connected() {
            return conn;
        }
        self.outstanding.values().filter_map(|o| o.resend_at).fold(conn, Duration::min)
    }

    pub fn tick(&mut self, now: Duration) {
        match self.conn.clone() {
            Conn::Waiting { until } if now >= until => self.dial(now),
            Conn::Dialing { since, .. } | Conn::Handshaking { since, .. } if now >= since + self.cfg.connect_timeout => {
                self.actions.push_back(ClientAction::Disconnect);
                self.lost(now);
            }
            Conn::Up { last_rx, next_ping, address } => {
                if now >= last_rx + self.cfg.ping_interval * (self.cfg.missed_pongs + 1) {
                    debug!(%address, "server stopped answering pings");
                    self.actions.push_back(ClientAction::Disconnect);
                    self.lost(now);
                    return;
                }
                if now >= next_ping {
                    self.actions.push_back(ClientAction::Send(Frame::Ping));
                    self.conn = Conn::Up { address, last_rx, next_ping: now + self.cfg.ping_interval };
                }
                let due: Vec<MsgId> =
                    self.outstanding.iter().filter(|(_, o)| o.resend_at.is_some_and(|t| now >= t)).map(|(m, _)| *m).collect();
                for m in due {
                    self.send_publish(now, m);
                }
            }
            _ => {}
        }
    }

    fn dial(&mut self, now: Duration) {
        self.blacklist.purge(now);
        match pick_server(&self.cfg.servers, &self.blacklist, now, &mut self.rng) {
            Ok(address) => {
                let address = address.to_owned();
                self.conn = Conn::Dialing { address: address.clone(), since: now };
                self.actions.push_back(ClientAction::Connect { address });
            }
            Err(ClientError::AllServersBlacklisted { retry_at }) => {
                self.conn = Conn::Waiting { until: retry_at.max(now) };
            }
            Err(_) => unreachable!("pick_server only fails on a fully blacklisted list"),
        }
    }

    /// The transport to the dialed server is open.
    pub fn on_transport_up(&mut self, now: Duration) {
        if let Conn::Dialing { address, .. } = &self.conn {
            self.conn = Conn::Handshaking { address: address.clone(), since: now };
            self.actions.push_back(ClientAction::Send(Frame::Connect { role: Role::Client, node: 0 }));
        }
    }

    /// The dial failed or the transport closed.
    pub fn on_transport_down(&mut self, now: Duration) {
        if !matches!(self.conn, Conn::Waiting { .. }) {
            self.lost(now);
        }
    }

    fn lost(&mut self, now: Duration) {
        let address = match std::mem::replace(&mut self.conn, Conn::Waiting { until: now }) {
            Conn::Waiting { .. } => return,
            Conn::Dialing { address, .. } | Conn::Handshaking { address, .. } => address,
            Conn::Up { address, .. } => {
                self.stats.disconnects += 1;
                self.actions.push_back(ClientAction::Disconnected { address: address.clone() });
                address
            }
        };
        self.blacklist.add(&address, now, self.cfg.reconnect.blacklist_ttl);
        let wait = self.cfg.reconnect.delay(self.failures, &mut self.rng);
        self.failures = self.failures.saturating_add(1);
        self.conn = Conn::Waiting { until: now + wait };
        for o in self.outstanding.values_mut() {
            o.resend_at = None;
        }
    }

    pub fn on_frame(&mut self, now: Duration, frame: Frame) {
        if let Conn::Up { last_rx, .. } = &mut self.conn {
            *last_rx = now;
        }
        match frame {
            Frame::ConnAck { .. } => {
                let Conn::Handshaking { address, .. } = &self.conn else { return };
                let address = address.clone();
                self.conn = Conn::Up { address: address.clone(), last_rx: now, next_ping: now + self.cfg.ping_interval };
                self.failures = 0;
                self.stats.connects += 1;
                self.actions.push_back(ClientAction::Connected { address });
                let subs: Vec<(TopicName, OrderKey)> = self.resume.iter().map(|(t, k)| (t.clone(), k)).collect();
                for (topic, resume) in subs {
                    self.actions.push_back(ClientAction::Send(Frame::Subscribe { topic, resume }));
                }
                let ids: Vec<MsgId> = self.outstanding.keys().copied().collect();
                for m in ids {
                    self.send_publish(now, m);
                }
            }
            Frame::SubAck { topic, head } => {
                // a fresh subscription starts after the server's head; an
                // empty topic is followed from its first message on
                if self.resume.get(&topic) == Some(OrderKey::ZERO) {
                    self.resume.advance(&topic, if head.is_zero() { OrderKey::ORIGIN } else { head });
                }
            }
            Frame::Notify(m) => {
                if !self.resume.advance(&m.topic, m.key) {
                    self.stats.out_of_order += 1;
                    return;
                }
                if !self.dedupe.insert(m.msg_id) {
                    self.stats.duplicates += 1;
                    return;
                }
                self.stats.delivered += 1;
                self.actions.push_back(ClientAction::Message(m));
            }
            Frame::RecoverEnd { topic, truncated } => {
                if truncated {
                    self.stats.truncated += 1;
                    self.actions.push_back(ClientAction::Truncated { topic });
                }
            }
            Frame::PubAck { msg_id, key } => {
                if self.outstanding.remove(&msg_id).is_some() {
                    self.actions.push_back(ClientAction::Published { msg_id, outcome: PublishOutcome::Acked(key) });
                }
            }
            Frame::PubNack { msg_id, reason, .. } => {
                let pause = self.cfg.nack_retry;
                if let Some(o) = self.outstanding.get_mut(&msg_id) {
                    o.last_nack = Some(reason);
                    o.resend_at = Some(now + pause);
                }
            }
            Frame::Ping => self.actions.push_back(ClientAction::Send(Frame::Pong)),
            Frame::Pong => {}
            Frame::Close { reason } => {
                debug!(?reason, "server closed the connection");
                self.actions.push_back(ClientAction::Disconnect);
                self.lost(now);
                if reason == CloseReason::ProtocolViolation {
                    tracing::warn!("server reported a protocol violation");
                }
            }
            other => debug!(kind = ?other.kind(), "ignoring unexpected frame"),
        }
    }
}
