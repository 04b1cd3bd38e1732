use std::net::SocketAddr;
use std::time::Duration;

use migrant_bench::{run, BenchConfig};
use migrant_client::ServerList;
use migrant_server::{start, RunningServer, ServerConfig, StartOptions};

fn free_addr() -> SocketAddr {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap()
}

async fn cluster(n: u16) -> Vec<RunningServer> {
    let peers: Vec<(u16, SocketAddr)> = (1..=n).map(|i| (i, free_addr())).collect();
    let mut out = Vec::new();
    for &(id, addr) in &peers {
        let mut c = ServerConfig::default();
        c.node_id = migrant_core::ServerId(id);
        c.listen_address = addr;
        c.admin_address = Some("127.0.0.1:0".parse().unwrap());
        c.peers = peers.iter().map(|(i, a)| (migrant_core::ServerId(*i), *a)).collect();
        c.engine.io_threads = 1;
        c.engine.workers = 1;
        c.engine.num_groups = 16;
        out.push(start(c, StartOptions::default()).await.unwrap());
    }
    for s in &out {
        s.ready(Duration::from_secs(20)).await.unwrap();
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn thousand_subscribers_spread_over_three_brokers() {
    let servers = cluster(3).await;
    let list = ServerList::uniform(servers.iter().map(|s| s.local_addr().to_string())).unwrap();
    let mut cfg = BenchConfig::new(list);
    cfg.connections = 1000;
    cfg.topics = 100;
    cfg.rate = 1.0;
    cfg.warmup = Duration::from_secs(2);
    cfg.duration = Duration::from_secs(6);
    cfg.admin = servers.iter().map(|s| format!("http://{}", s.admin_addr().unwrap())).collect();
    let r = run(&cfg).await.unwrap().report;

    assert_eq!(r.connections.connected, 1000);
    for s in &servers {
        let n = r.connections.per_server.get(&s.local_addr().to_string()).copied().unwrap_or(0);
        assert!((300..=367).contains(&n), "{} has {n} connections", s.local_addr());
    }
    let brokers: i64 = r.brokers.iter().map(|b| b.as_ref().unwrap().connections as i64).sum();
    // the publisher is gone by the time the counters are read
    assert_eq!(brokers, 1000);

    let p = r.published.as_ref().unwrap();
    assert!((p.rate - 100.0).abs() <= 5.0, "aggregate rate {}", p.rate);
    assert_eq!(p.failed, 0);
    assert_eq!(p.unresolved, 0);
    assert!(r.audit.clean(), "{:?}", r.audit);
    assert!(r.audit.expected > 0);
    assert!(r.received > 0 && r.latency_ms.mean.is_some());
    assert!(r.gbps.unwrap() > 0.0);
    for s in servers {
        s.shutdown().await;
    }
}
