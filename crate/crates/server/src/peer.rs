use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use bytes::{Bytes, BytesMut};
use migrant_core::wire::{encode_frame, Frame, Role};
use migrant_core::ServerId;
use tokio::io::AsyncWriteExt;
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tracing::debug;

use crate::Shared;

const RETRY: Duration = Duration::from_millis(200);
const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);
const WRITE_GATHER: usize = 64 << 10;

/// Keeps an outbound link to one peer. Frames queued while the link is
/// down are dropped: the node's own retries cover them.
pub(crate) async fn dial(shared: Arc<Shared>, peer: ServerId, addr: SocketAddr, mut rx: mpsc::UnboundedReceiver<Bytes>) {
    let hello = encode_frame(&Frame::Connect { role: Role::Peer, node: shared.cfg.node_id.0 }).expect("connect encodes");
    let mut buf = BytesMut::new();
    loop {
        while rx.try_recv().is_ok() {}
        let stream = match tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr)).await {
            Ok(Ok(s)) => s,
            _ => {
                tokio::time::sleep(RETRY).await;
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let mut stream = stream;
        if stream.write_all(&hello).await.is_err() {
            tokio::time::sleep(RETRY).await;
            continue;
        }
        debug!(%peer, %addr, "peer link up");
        loop {
            let Some(first) = rx.recv().await else { return };
            buf.extend_from_slice(&first);
            while buf.len() < WRITE_GATHER {
                match rx.try_recv() {
                    Ok(b) => buf.extend_from_slice(&b),
                    Err(_) => break,
                }
            }
            if stream.write_all(&buf).await.is_err() {
                buf.clear();
                break;
            }
            buf.clear();
        }
        debug!(%peer, "peer link down");
        tokio::time::sleep(RETRY).await;
    }
}
