use std::collections::HashMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use crossbeam_channel::{Receiver, RecvTimeoutError};
use migrant_core::cluster::{NodeConfig, NodeEvent, NodeOutput, ServerNode};
use migrant_core::engine::{Origin, PublishRequest, WorkerInput};
use migrant_core::wire::{encode_frame, Frame};
use migrant_core::ServerId;
use tokio::sync::{mpsc, oneshot};
use tracing::{debug, info, warn};

use crate::{ClusterMsg, Shared, WorkerMsg};

const BURST: usize = 512;
const MAX_WAIT: Duration = Duration::from_millis(50);

struct Cluster {
    shared: Arc<Shared>,
    node: ServerNode,
    links: HashMap<ServerId, mpsc::UnboundedSender<Bytes>>,
    local: HashMap<u64, oneshot::Sender<Frame>>,
    next_local: u64,
}

pub(crate) fn run(
    shared: Arc<Shared>,
    rx: Receiver<ClusterMsg>,
    links: HashMap<ServerId, mpsc::UnboundedSender<Bytes>>,
    rejoin: bool,
) {
    let cfg = &shared.cfg;
    let mut node_cfg = NodeConfig::new(cfg.node_id, cfg.members(), cfg.engine.num_groups);
    node_cfg.kv.session_timeout = cfg.session_timeout;
    node_cfg.seed = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64)
        ^ u64::from(cfg.node_id.0);
    let now = shared.clock.now();
    let node = if rejoin {
        ServerNode::restarted(node_cfg, shared.cache.clone(), now)
    } else {
        ServerNode::new(node_cfg, shared.cache.clone(), now)
    };
    let mut c = Cluster { shared, node, links, local: HashMap::new(), next_local: 1 };
    c.route();
    loop {
        let now = c.shared.clock.now();
        let wait = c.node.next_deadline().saturating_sub(now).min(MAX_WAIT);
        let first = match rx.recv_timeout(wait) {
            Ok(m) => Some(m),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        for msg in first.into_iter().chain(rx.try_iter().take(BURST)) {
            if !c.on_msg(msg) {
                return;
            }
        }
        let now = c.shared.clock.now();
        if now >= c.node.next_deadline() {
            c.node.tick(now);
        }
        c.route();
    }
}

impl Cluster {
    fn on_msg(&mut self, msg: ClusterMsg) -> bool {
        let now = self.shared.clock.now();
        match msg {
            ClusterMsg::Publish(req) => self.node.handle_publish(now, req),
            ClusterMsg::Peer { from, frame } => self.node.handle_peer_frame(now, from, frame),
            ClusterMsg::LocalPublish { publish, reply } => {
                let id = self.next_local;
                self.next_local += 1;
                self.local.insert(id, reply);
                self.node.handle_publish(now, PublishRequest { origin: Origin::Local(id), publish });
            }
            ClusterMsg::Status(reply) => {
                let _ = reply.send(self.node.status(now));
            }
            ClusterMsg::Stop => return false,
        }
        self.route();
        true
    }

    fn to_workers(&self, input: WorkerInput) {
        for w in &self.shared.workers {
            let _ = w.send(WorkerMsg::Input(input.clone()));
        }
    }

    fn route(&mut self) {
        let outputs: Vec<NodeOutput> = self.node.drain().collect();
        for o in outputs {
            match o {
                NodeOutput::ToPeer { peer, frame } => {
                    let Some(link) = self.links.get(&peer) else { continue };
                    match encode_frame(&frame) {
                        Ok(bytes) => {
                            if link.send(bytes).is_ok() {
                                self.shared.counters.peer_frames_out.fetch_add(1, Ordering::Relaxed);
                            }
                        }
                        Err(e) => warn!(%peer, "dropping unencodable peer frame: {e}"),
                    }
                }
                NodeOutput::Reply { origin: Origin::Client { worker, conn }, frame } => {
                    if let Some(w) = self.shared.workers.get(worker as usize) {
                        let _ = w.send(WorkerMsg::Input(WorkerInput::Reply { conn, frame }));
                    }
                }
                NodeOutput::Reply { origin: Origin::Local(id), frame } => {
                    if let Some(tx) = self.local.remove(&id) {
                        let _ = tx.send(frame);
                    }
                }
                NodeOutput::Deliver(m) => self.to_workers(WorkerInput::Deliver(m)),
                NodeOutput::CloseClients(reason) => self.to_workers(WorkerInput::CloseAll { reason }),
                NodeOutput::Event(e) => self.on_event(e),
            }
        }
        self.shared.accepting.store(self.node.accepting_clients(), Ordering::Release);
    }

    fn on_event(&self, e: NodeEvent) {
        match e {
            NodeEvent::Assigned { .. } | NodeEvent::Acked { .. } => {}
            NodeEvent::Fenced => {
                self.shared.counters.fenced.fetch_add(1, Ordering::Relaxed);
                warn!(node = %self.shared.cfg.node_id, "fenced: lost peers and coordination quorum");
            }
            NodeEvent::Won { group, epoch } => debug!(%group, epoch, "became coordinator"),
            NodeEvent::GapDetected { group, topic, head, prev } => {
                debug!(%group, %topic, %head, %prev, "gap detected")
            }
            other => info!(node = %self.shared.cfg.node_id, "{other:?}"),
        }
    }
}
