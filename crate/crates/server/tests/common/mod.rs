#![allow(dead_code)]

use std::net::SocketAddr;
use std::time::Duration;

use migrant_core::wire::{encode_frame, DecodeBuffer, Frame, Role};
use migrant_server::{start, RunningServer, ServerConfig, StartOptions};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

pub fn free_addr() -> SocketAddr {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap()
}

pub fn config(id: u16, peers: &[(u16, SocketAddr)]) -> ServerConfig {
    let mut c = ServerConfig::default();
    c.node_id = migrant_core::ServerId(id);
    c.listen_address = peers.iter().find(|(i, _)| *i == id).map_or_else(free_addr, |(_, a)| *a);
    c.admin_address = Some("127.0.0.1:0".parse().unwrap());
    c.peers = peers.iter().map(|(i, a)| (migrant_core::ServerId(*i), *a)).collect();
    c.engine.io_threads = 1;
    c.engine.workers = 2;
    c.engine.num_groups = 16;
    c
}

pub async fn standalone() -> RunningServer {
    let s = start(config(1, &[]), StartOptions::default()).await.unwrap();
    s.ready(Duration::from_secs(10)).await.unwrap();
    s
}

pub async fn cluster(n: u16) -> Vec<RunningServer> {
    let peers: Vec<(u16, SocketAddr)> = (1..=n).map(|i| (i, free_addr())).collect();
    let mut out = Vec::new();
    for i in 1..=n {
        out.push(start(config(i, &peers), StartOptions::default()).await.unwrap());
    }
    for s in &out {
        s.ready(Duration::from_secs(20)).await.unwrap();
    }
    out
}

/// A bare protocol connection for tests.
pub struct Conn {
    stream: TcpStream,
    decoder: DecodeBuffer,
    ready: std::collections::VecDeque<Frame>,
}

impl Conn {
    pub async fn open(addr: SocketAddr) -> Conn {
        let stream = TcpStream::connect(addr).await.unwrap();
        stream.set_nodelay(true).unwrap();
        Conn { stream, decoder: DecodeBuffer::new(), ready: Default::default() }
    }

    pub async fn client(addr: SocketAddr) -> Conn {
        let mut c = Conn::open(addr).await;
        c.send(&Frame::Connect { role: Role::Client, node: 0 }).await;
        match c.recv().await {
            Some(Frame::ConnAck { .. }) => c,
            other => panic!("expected CONNACK, got {other:?}"),
        }
    }

    pub async fn send(&mut self, f: &Frame) {
        self.stream.write_all(&encode_frame(f).unwrap()).await.unwrap();
    }

    pub async fn send_raw(&mut self, b: &[u8]) {
        self.stream.write_all(b).await.unwrap();
    }

    /// Next frame, or `None` on close or after 5 s of silence.
    pub async fn recv(&mut self) -> Option<Frame> {
        self.recv_within(Duration::from_secs(5)).await
    }

    pub async fn recv_within(&mut self, limit: Duration) -> Option<Frame> {
        let mut buf = [0u8; 4096];
        loop {
            if let Some(f) = self.ready.pop_front() {
                return Some(f);
            }
            let n = tokio::time::timeout(limit, self.stream.read(&mut buf)).await.ok()?.ok()?;
            if n == 0 {
                return None;
            }
            self.ready.extend(self.decoder.decode_frames(&buf[..n]).unwrap());
        }
    }
}
