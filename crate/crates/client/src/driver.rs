use std::collections::HashMap;
use std::time::Duration;

use bytes::BytesMut;
use migrant_core::client::{ClientAction, ClientConfig, ClientCore, ClientError, PublishOutcome};
use migrant_core::wire::{encode_into, DecodeBuffer, Frame};
use migrant_core::MsgId;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::{Command, Event, Published};

const READ_CHUNK: usize = 4096;

/// Transport events, tagged with the attempt they belong to.
enum Transport {
    Up(u64, TcpStream),
    Down(u64),
    Frames(u64, Vec<Frame>),
}

struct Driver {
    core: ClientCore,
    epoch: Instant,
    /// Current transport attempt; events of older attempts are stale.
    attempt: u64,
    writer: Option<OwnedWriteHalf>,
    reader: Option<JoinHandle<()>>,
    transport_tx: mpsc::UnboundedSender<Transport>,
    events: mpsc::UnboundedSender<Event>,
    waiters: HashMap<MsgId, oneshot::Sender<Result<Published, ClientError>>>,
    out: BytesMut,
}

pub(crate) async fn run(cfg: ClientConfig, mut cmds: mpsc::UnboundedReceiver<Command>, events: mpsc::UnboundedSender<Event>) {
    let (transport_tx, mut transport_rx) = mpsc::unbounded_channel();
    let epoch = Instant::now();
    let mut d = Driver {
        core: ClientCore::new(cfg, Duration::ZERO),
        epoch,
        attempt: 0,
        writer: None,
        reader: None,
        transport_tx,
        events,
        waiters: HashMap::new(),
        out: BytesMut::new(),
    };
    let closed = loop {
        d.perform().await;
        let deadline = d.core.next_deadline();
        let wake = d.epoch + deadline.min(Duration::from_secs(86_400 * 365));
        tokio::select! {
            c = cmds.recv() => match c {
                None => break None,
                Some(Command::Close(reply)) => break Some(reply),
                Some(c) => d.on_command(c),
            },
            Some(t) = transport_rx.recv() => d.on_transport(t),
            _ = tokio::time::sleep_until(wake) => {
                let now = d.now();
                d.core.tick(now);
            }
        }
    };
    d.teardown().await;
    if let Some(reply) = closed {
        let _ = reply.send(());
    }
}

impl Driver {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn on_command(&mut self, c: Command) {
        let now = self.now();
        match c {
            Command::Subscribe(topic) => self.core.subscribe(topic),
            Command::Publish { topic, payload, ack, reply } => match self.core.publish(now, topic, payload, ack) {
                Ok(msg_id) if ack => {
                    self.waiters.insert(msg_id, reply);
                }
                Ok(msg_id) => {
                    let _ = reply.send(Ok(Published { msg_id, key: None }));
                }
                Err(e) => {
                    let _ = reply.send(Err(e));
                }
            },
            Command::Stats(reply) => {
                let _ = reply.send(self.core.stats());
            }
            Command::Close(_) => unreachable!("handled by the loop"),
        }
    }

    fn on_transport(&mut self, t: Transport) {
        let now = self.now();
        match t {
            Transport::Up(a, stream) if a == self.attempt => {
                let (mut rd, wr) = stream.into_split();
                self.writer = Some(wr);
                let tx = self.transport_tx.clone();
                self.reader = Some(tokio::spawn(async move {
                    let mut decoder = DecodeBuffer::new();
                    let mut buf = vec![0u8; READ_CHUNK];
                    loop {
                        let n = match rd.read(&mut buf).await {
                            Ok(0) | Err(_) => break,
                            Ok(n) => n,
                        };
                        match decoder.decode_frames(&buf[..n]) {
                            Ok(frames) if frames.is_empty() => {}
                            Ok(frames) => {
                                if tx.send(Transport::Frames(a, frames)).is_err() {
                                    return;
                                }
                            }
                            Err(e) => {
                                tracing::debug!("undecodable data from server: {e}");
                                break;
                            }
                        }
                    }
                    let _ = tx.send(Transport::Down(a));
                }));
                self.core.on_transport_up(now);
            }
            Transport::Down(a) if a == self.attempt => {
                self.drop_transport();
                self.core.on_transport_down(now);
            }
            Transport::Frames(a, frames) if a == self.attempt => {
                for f in frames {
                    self.core.on_frame(now, f);
                }
            }
            _ => {}
        }
    }

    fn drop_transport(&mut self) {
        self.writer = None;
        if let Some(r) = self.reader.take() {
            r.abort();
        }
    }

    /// Carries out everything the state machine asked for.
    async fn perform(&mut self) {
        loop {
            let actions: Vec<ClientAction> = self.core.drain_actions().collect();
            if actions.is_empty() {
                break;
            }
            for a in actions {
                self.act(a);
            }
            self.flush().await;
        }
    }

    fn act(&mut self, a: ClientAction) {
        match a {
            ClientAction::Connect { address } => {
                self.drop_transport();
                self.attempt += 1;
                let attempt = self.attempt;
                let tx = self.transport_tx.clone();
                tokio::spawn(async move {
                    let t = match TcpStream::connect(address.as_str()).await {
                        Ok(s) => {
                            let _ = s.set_nodelay(true);
                            Transport::Up(attempt, s)
                        }
                        Err(_) => Transport::Down(attempt),
                    };
                    let _ = tx.send(t);
                });
            }
            ClientAction::Send(frame) => {
                if self.writer.is_some() {
                    if let Err(e) = encode_into(&frame, &mut self.out) {
                        tracing::warn!("cannot encode {:?}: {e}", frame.kind());
                    }
                }
            }
            ClientAction::Disconnect => {
                self.out.clear();
                self.drop_transport();
                self.attempt += 1;
            }
            ClientAction::Message(m) => {
                let _ = self.events.send(Event::Message(m));
            }
            ClientAction::Published { msg_id, outcome } => {
                if let Some(w) = self.waiters.remove(&msg_id) {
                    let r = match outcome {
                        PublishOutcome::Acked(key) => Ok(Published { msg_id, key: Some(key) }),
                        PublishOutcome::Failed(e) => Err(e),
                    };
                    let _ = w.send(r);
                }
            }
            ClientAction::Truncated { topic } => {
                let _ = self.events.send(Event::Truncated { topic });
            }
            ClientAction::Connected { address } => {
                let _ = self.events.send(Event::Connected { address });
            }
            ClientAction::Disconnected { address } => {
                let _ = self.events.send(Event::Disconnected { address });
            }
        }
    }

    async fn flush(&mut self) {
        if self.out.is_empty() {
            return;
        }
        let Some(w) = self.writer.as_mut() else {
            self.out.clear();
            return;
        };
        let bytes = self.out.split();
        if w.write_all(&bytes).await.is_err() {
            let now = self.now();
            self.drop_transport();
            self.core.on_transport_down(now);
        }
    }

    async fn teardown(&mut self) {
        if let Some(mut w) = self.writer.take() {
            let mut buf = BytesMut::new();
            let _ = encode_into(&Frame::Close { reason: migrant_core::wire::CloseReason::Normal }, &mut buf);
            let _ = w.write_all(&buf).await;
            let _ = w.shutdown().await;
        }
        self.drop_transport();
    }
}
