use std::net::SocketAddr;
use std::time::Duration;

use migrant_client::{AdminClient, Client, ClientConfig, Event, ServerList};
use migrant_core::OrderKey;
use migrant_server::{start, RunningServer, ServerConfig, StartOptions};

fn free_addr() -> SocketAddr {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

async fn servers(n: u16) -> Vec<RunningServer> {
    let peers: Vec<_> = (1..=n).map(|i| (migrant_core::ServerId(i), free_addr())).collect();
    let mut out = Vec::new();
    for (id, addr) in &peers {
        let mut c = ServerConfig::default();
        c.node_id = *id;
        c.listen_address = *addr;
        c.admin_address = Some("127.0.0.1:0".parse().unwrap());
        c.peers = if n > 1 { peers.clone() } else { Vec::new() };
        c.engine.io_threads = 1;
        c.engine.workers = 1;
        c.engine.num_groups = 8;
        out.push(start(c, StartOptions::default()).await.unwrap());
    }
    for s in &out {
        s.ready(Duration::from_secs(20)).await.unwrap();
    }
    out
}

fn list(servers: &[RunningServer]) -> ServerList {
    ServerList::uniform(servers.iter().map(|s| s.local_addr().to_string())).unwrap()
}

async fn next_message(c: &mut Client) -> migrant_client::Message {
    loop {
        match tokio::time::timeout(Duration::from_secs(10), c.next_event()).await.expect("event in time") {
            Some(Event::Message(m)) => return m,
            Some(_) => {}
            None => panic!("client stopped"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn publish_subscribe_and_admin() {
    let s = servers(1).await;
    let mut sub = Client::connect(ClientConfig::new(list(&s)));
    sub.subscribe("weather/paris").unwrap();
    // wait for the subscription to be in place
    loop {
        if let Some(Event::Connected { .. }) = sub.next_event().await {
            break;
        }
    }
    tokio::time::sleep(Duration::from_millis(100)).await;
    let publ = Client::connect(ClientConfig::new(list(&s)));
    let k1 = publ.publish("weather/paris", "sunny").await.unwrap();
    let k2 = publ.publish("weather/paris", "rain").await.unwrap();
    assert!(k1 < k2);
    let m = next_message(&mut sub).await;
    assert_eq!((m.key, &m.payload[..]), (k1, &b"sunny"[..]));
    assert_eq!(next_message(&mut sub).await.key, k2);

    let admin = AdminClient::new(format!("http://{}", s[0].admin_addr().unwrap()));
    let h = admin.history("weather/paris", None).await.unwrap();
    assert_eq!(h.messages.iter().map(|e| e.key).collect::<Vec<_>>(), vec![k1, k2]);
    assert_eq!(admin.history("weather/paris", Some(k1)).await.unwrap().messages.len(), 1);
    let r = admin.publish("weather/paris", "snow").await.unwrap();
    assert!(r.key > k2);
    assert_eq!(next_message(&mut sub).await.payload, "snow");
    let stats = admin.stats().await.unwrap();
    assert_eq!(stats.connections, 2);
    assert!(stats.notifications >= 3, "{stats:?}");
    assert_eq!(admin.cluster().await.unwrap()["accepting_clients"], true);
    assert!(matches!(
        admin.history("bad topic\u{0}", None).await,
        Err(migrant_client::AdminError::Status { status: 400, .. })
    ));

    publ.close().await;
    sub.close().await;
    for s in s {
        s.shutdown().await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn subscriber_recovers_across_a_server_stop() {
    let mut s = servers(3).await;
    let mut sub = Client::connect(ClientConfig::new(list(&s)));
    sub.subscribe("feed").unwrap();
    let address = loop {
        if let Some(Event::Connected { address }) = sub.next_event().await {
            break address;
        }
    };
    tokio::time::sleep(Duration::from_millis(100)).await;
    let victim = s.iter().position(|x| x.local_addr().to_string() == address).unwrap();
    // the publisher avoids the victim so its own retries are not under test
    let others: Vec<String> =
        s.iter().enumerate().filter(|(i, _)| *i != victim).map(|(_, x)| x.local_addr().to_string()).collect();
    let publ = Client::connect(ClientConfig::new(ServerList::uniform(others).unwrap()));

    let mut acked = Vec::new();
    for i in 0..5 {
        acked.push(publ.publish("feed", format!("m{i}")).await.unwrap());
    }
    s.remove(victim).shutdown().await;
    for i in 5..10 {
        acked.push(publ.publish("feed", format!("m{i}")).await.unwrap());
    }
    let mut got: Vec<OrderKey> = Vec::new();
    while got.len() < acked.len() {
        got.push(next_message(&mut sub).await.key);
    }
    assert_eq!(got, acked, "every acknowledged message exactly once, in order");
    assert!(sub.try_next_event().is_none_or(|e| !matches!(e, Event::Message(_))));
    publ.close().await;
    sub.close().await;
    for x in s {
        x.shutdown().await;
    }
}
