mod common;

use std::time::Duration;

use bytes::Bytes;
use common::{standalone, Conn};
use migrant_core::wire::{CloseReason, Frame, Publish};
use migrant_core::{MsgId, OrderKey, TopicName};

fn publish(topic: &TopicName, id: u128, body: &'static [u8]) -> Frame {
    Frame::Publish(Publish { topic: topic.clone(), msg_id: MsgId(id), ack_requested: true, payload: Bytes::from_static(body) })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn publish_reaches_subscriber_in_order() {
    let server = standalone().await;
    let t = TopicName::new("prices/eur").unwrap();
    let mut sub = Conn::client(server.local_addr()).await;
    sub.send(&Frame::Subscribe { topic: t.clone(), resume: OrderKey::ZERO }).await;
    assert!(matches!(sub.recv().await, Some(Frame::SubAck { .. })));

    let mut publ = Conn::client(server.local_addr()).await;
    for i in 1..=20u128 {
        publ.send(&publish(&t, i, b"tick")).await;
    }
    let mut acked = Vec::new();
    while acked.len() < 20 {
        match publ.recv().await {
            Some(Frame::PubAck { msg_id, key }) => acked.push((msg_id, key)),
            other => panic!("unexpected {other:?}"),
        }
    }
    let mut seen = Vec::new();
    while seen.len() < 20 {
        match sub.recv().await {
            Some(Frame::Notify(m)) => seen.push(m.key),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(seen.windows(2).all(|w| w[0] < w[1]), "{seen:?}");
    let mut acked_keys: Vec<_> = acked.iter().map(|(_, k)| *k).collect();
    acked_keys.sort();
    assert_eq!(acked_keys, seen);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn resume_replays_the_cache() {
    let server = standalone().await;
    let t = TopicName::new("news").unwrap();
    let mut publ = Conn::client(server.local_addr()).await;
    for i in 1..=5u128 {
        publ.send(&publish(&t, i, b"n")).await;
        assert!(matches!(publ.recv().await, Some(Frame::PubAck { .. })));
    }
    let mut sub = Conn::client(server.local_addr()).await;
    sub.send(&Frame::Subscribe { topic: t.clone(), resume: OrderKey::ORIGIN }).await;
    let mut keys = Vec::new();
    while let Some(f) = sub.recv_within(Duration::from_millis(500)).await {
        if let Frame::Notify(m) = f {
            keys.push(m.key);
        }
    }
    assert_eq!(keys.len(), 5);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn garbage_is_a_protocol_violation() {
    let server = standalone().await;
    let mut c = Conn::client(server.local_addr()).await;
    // length 3, unknown kind 0xee
    c.send_raw(&[0, 0, 0, 3, 0xee, 0, 0]).await;
    assert_eq!(c.recv().await, Some(Frame::Close { reason: CloseReason::ProtocolViolation }));
    assert_eq!(c.recv().await, None);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_closes_clients() {
    let server = standalone().await;
    let mut c = Conn::client(server.local_addr()).await;
    server.shutdown().await;
    assert_eq!(c.recv().await, Some(Frame::Close { reason: CloseReason::Shutdown }));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn connection_limit_is_enforced() {
    let mut cfg = common::config(1, &[]);
    cfg.engine.max_connections = 1;
    let server = migrant_server::start(cfg, Default::default()).await.unwrap();
    server.ready(Duration::from_secs(10)).await.unwrap();
    let _first = Conn::client(server.local_addr()).await;
    let mut second = Conn::open(server.local_addr()).await;
    second.send(&Frame::Connect { role: migrant_core::wire::Role::Client, node: 0 }).await;
    assert_eq!(second.recv().await, Some(Frame::Close { reason: CloseReason::ConnectionLimit }));
    assert_eq!(server.stats().refused_total, 1);
    server.shutdown().await;
}
