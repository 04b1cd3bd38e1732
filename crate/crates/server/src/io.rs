use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use migrant_core::engine::{Assignment, OutboundBudget, WorkerInput};
use migrant_core::wire::{CloseReason, DecodeBuffer, Frame, Role};
use migrant_core::ServerId;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tracing::{debug, warn};

use crate::{close_frame, ClusterMsg, ConnHandle, Outbound, Shared, WorkerMsg};

/// Time a new connection gets to send its first frame.
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const READ_CHUNK: usize = 16 << 10;
/// Bytes gathered into one socket write.
const WRITE_GATHER: usize = 64 << 10;

/// A client connection handed from the accept task to its I/O shard.
pub(crate) struct NewConn {
    stream: std::net::TcpStream,
    assignment: Assignment,
    address: String,
    first: Vec<Frame>,
    decoder: DecodeBuffer,
}

pub(crate) fn run_shard(shared: Arc<Shared>, mut rx: mpsc::UnboundedReceiver<NewConn>) {
    let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            warn!("cannot build I/O runtime: {e}");
            return;
        }
    };
    rt.block_on(async {
        while let Some(c) = rx.recv().await {
            tokio::spawn(serve_client(shared.clone(), c));
        }
        // let CLOSE frames queued by the workers reach their sockets
        tokio::time::sleep(Duration::from_millis(200)).await;
    });
}

pub(crate) async fn accept_loop(listener: TcpListener, shared: Arc<Shared>, io: Vec<mpsc::UnboundedSender<NewConn>>) {
    let io = Arc::new(io);
    loop {
        let (stream, addr) = match listener.accept().await {
            Ok(x) => x,
            Err(e) => {
                // typically EMFILE; back off instead of spinning
                warn!("accept failed: {e}");
                tokio::time::sleep(Duration::from_millis(50)).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        tokio::spawn(handshake(stream, addr, shared.clone(), io.clone()));
    }
}

async fn handshake(mut stream: TcpStream, addr: SocketAddr, shared: Arc<Shared>, io: Arc<Vec<mpsc::UnboundedSender<NewConn>>>) {
    let mut decoder = DecodeBuffer::new();
    let mut frames = Vec::new();
    let mut buf = vec![0u8; 4096];
    let first = tokio::time::timeout(HANDSHAKE_TIMEOUT, async {
        while frames.is_empty() {
            let n = stream.read(&mut buf).await.ok().filter(|n| *n > 0)?;
            decoder.decode_into(&buf[..n], &mut frames).ok()?;
        }
        Some(())
    })
    .await;
    if !matches!(first, Ok(Some(()))) {
        debug!(%addr, "connection dropped before its first frame");
        let _ = stream.write_all(&close_frame(CloseReason::ProtocolViolation)).await;
        return;
    }
    if let Frame::Connect { role: Role::Peer, node } = frames[0] {
        frames.remove(0);
        serve_peer(stream, ServerId(node), decoder, frames, shared).await;
        return;
    }
    let address = addr.to_string();
    match shared.acceptor.accept(&address) {
        Err(e) => {
            debug!(%addr, "refused: {e}");
            shared.counters.refused.fetch_add(1, Ordering::Relaxed);
            let _ = stream.write_all(&close_frame(CloseReason::ConnectionLimit)).await;
        }
        Ok(assignment) => {
            shared.counters.accepted.fetch_add(1, Ordering::Relaxed);
            let shard = assignment.io_shard;
            let stream = match stream.into_std() {
                Ok(s) => s,
                Err(_) => {
                    shared.acceptor.release();
                    return;
                }
            };
            let c = NewConn { stream, assignment, address, first: frames, decoder };
            if io[shard].send(c).is_err() {
                shared.acceptor.release();
            }
        }
    }
}

/// Reads frames from another member and hands them to the cluster thread.
async fn serve_peer(mut stream: TcpStream, from: ServerId, mut decoder: DecodeBuffer, first: Vec<Frame>, shared: Arc<Shared>) {
    debug!(%from, "peer connected");
    let forward = |frame: Frame| {
        shared.counters.peer_frames_in.fetch_add(1, Ordering::Relaxed);
        shared.cluster.send(ClusterMsg::Peer { from, frame }).is_ok()
    };
    for f in first {
        forward(f);
    }
    let mut buf = vec![0u8; READ_CHUNK];
    let mut frames = Vec::new();
    loop {
        let n = match stream.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        if let Err(e) = decoder.decode_into(&buf[..n], &mut frames) {
            warn!(%from, "bad frame from peer: {e}");
            break;
        }
        for f in frames.drain(..) {
            if !forward(f) {
                return;
            }
        }
    }
    debug!(%from, "peer link closed");
}

async fn serve_client(shared: Arc<Shared>, c: NewConn) {
    let conn = c.assignment.conn;
    let worker = &shared.workers[c.assignment.worker];
    let stream = match TcpStream::from_std(c.stream) {
        Ok(s) => s,
        Err(_) => {
            shared.acceptor.release();
            return;
        }
    };
    let (tx, mut rx) = mpsc::unbounded_channel();
    let budget = Arc::new(OutboundBudget::new(shared.cfg.engine.max_outbound_bytes));
    let handle = ConnHandle { tx, budget: budget.clone() };
    let _ = worker.send(WorkerMsg::Attach { conn, address: c.address, handle });
    for frame in c.first {
        let _ = worker.send(WorkerMsg::Input(WorkerInput::Frame { conn, frame }));
    }
    let mut decoder = c.decoder;
    let (mut rd, mut wr) = stream.into_split();
    let mut rbuf = vec![0u8; READ_CHUNK];
    let mut frames = Vec::new();
    let mut wbuf = BytesMut::new();
    // whether the worker already forgot the connection
    let mut closed_by_server = false;
    loop {
        tokio::select! {
            r = rd.read(&mut rbuf) => {
                let n = match r {
                    Ok(0) | Err(_) => break,
                    Ok(n) => n,
                };
                let decoded = decoder.decode_into(&rbuf[..n], &mut frames);
                for frame in frames.drain(..) {
                    let _ = worker.send(WorkerMsg::Input(WorkerInput::Frame { conn, frame }));
                }
                if decoded.is_err() {
                    let _ = wr.write_all(&close_frame(CloseReason::ProtocolViolation)).await;
                    break;
                }
            }
            o = rx.recv() => {
                let Some(first) = o else { closed_by_server = true; break };
                let (gathered, close) = gather(first, &mut rx, &mut wbuf);
                let ok = gathered.is_empty() || wr.write_all(&gathered).await.is_ok();
                budget.release(gathered.len());
                if close {
                    closed_by_server = true;
                    let _ = wr.shutdown().await;
                    break;
                }
                if !ok {
                    break;
                }
            }
        }
    }
    if !closed_by_server {
        let _ = worker.send(WorkerMsg::Input(WorkerInput::Closed { conn }));
    }
    shared.acceptor.release();
}

/// Collects queued writes into one buffer. Returns the bytes and whether a
/// close was requested after them.
fn gather(first: Outbound, rx: &mut mpsc::UnboundedReceiver<Outbound>, wbuf: &mut BytesMut) -> (Bytes, bool) {
    let mut next = Some(first);
    let mut close = false;
    while let Some(o) = next.take() {
        match o {
            Outbound::Bytes(b) => {
                if wbuf.is_empty() && b.len() >= WRITE_GATHER {
                    return (b, false);
                }
                wbuf.extend_from_slice(&b);
            }
            Outbound::Close => {
                close = true;
                break;
            }
        }
        if wbuf.len() < WRITE_GATHER {
            next = rx.try_recv().ok();
        }
    }
    (wbuf.split().freeze(), close)
}
