mod common;

use std::time::{Duration, Instant};

use bytes::Bytes;
use common::{cluster, Conn};
use migrant_core::wire::{Frame, Publish};
use migrant_core::{MsgId, OrderKey, TopicName};

async fn publish_acked(c: &mut Conn, topic: &TopicName, id: u128) -> OrderKey {
    let p = Publish { topic: topic.clone(), msg_id: MsgId(id), ack_requested: true, payload: Bytes::from_static(b"x") };
    loop {
        c.send(&Frame::Publish(p.clone())).await;
        match c.recv().await {
            Some(Frame::PubAck { msg_id, key }) if msg_id == MsgId(id) => return key,
            Some(Frame::PubNack { .. }) => tokio::time::sleep(Duration::from_millis(100)).await,
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn publications_cross_servers_and_reach_two_caches() {
    let servers = cluster(3).await;
    let t = TopicName::new("cross").unwrap();
    let mut sub = Conn::client(servers[2].local_addr()).await;
    sub.send(&Frame::Subscribe { topic: t.clone(), resume: OrderKey::ZERO }).await;
    assert!(matches!(sub.recv().await, Some(Frame::SubAck { .. })));

    let mut publ = Conn::client(servers[0].local_addr()).await;
    let mut keys = Vec::new();
    for i in 1..=10 {
        keys.push(publish_acked(&mut publ, &t, i).await);
    }
    let mut seen = Vec::new();
    while seen.len() < keys.len() {
        match sub.recv().await {
            Some(Frame::Notify(m)) => seen.push(m.key),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert_eq!(seen, keys);
    // an acknowledged message is held by at least two servers
    tokio::time::sleep(Duration::from_millis(300)).await;
    let holders = servers.iter().filter(|s| s.stats().cached_messages >= 10).count();
    assert!(holders >= 2, "only {holders} servers hold the messages");
    for s in servers {
        s.shutdown().await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn survivors_take_over_a_stopped_coordinator() {
    let mut servers = cluster(3).await;
    let t = TopicName::new("takeover").unwrap();
    let mut publ = Conn::client(servers[0].local_addr()).await;
    let before = publish_acked(&mut publ, &t, 1).await;

    // stop whichever server coordinates the topic's group
    let group = migrant_core::topic_group(&t, 16).index();
    let mut owner = None;
    for (i, s) in servers.iter().enumerate() {
        let st = s.status().await.unwrap();
        if st.owned_groups.contains(&group) {
            owner = Some(i);
        }
    }
    let owner = owner.expect("some server owns the group");
    let victim = servers.remove(owner);
    victim.shutdown().await;

    let survivor = &servers[0];
    let mut publ = Conn::client(survivor.local_addr()).await;
    let started = Instant::now();
    let after = publish_acked(&mut publ, &t, 2).await;
    assert!(after > before, "{after} not after {before}");
    assert!(after.epoch > before.epoch, "takeover must open a new epoch");
    assert!(started.elapsed() < Duration::from_secs(15));
    for s in servers {
        s.shutdown().await;
    }
}
