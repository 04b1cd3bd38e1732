//! Server configuration, read from a `key = value` file.
//!
//! ```text
//! # comments start with '#'
//! node_id = 1
//! listen_address = 127.0.0.1:7001
//! admin_address = 127.0.0.1:8001
//! peers = 1@127.0.0.1:7001, 2@127.0.0.1:7002, 3@127.0.0.1:7003
//! io_threads = 1
//! workers = 1
//! num_groups = 100
//! cache_depth = 1000
//! batch_max_delay_ms = 0
//! batch_max_bytes = 65536
//! conflation_window_ms = 0
//! max_outbound_bytes = 4194304
//! max_connections = 1000000
//! session_timeout_ms = 5000
//! ```
//!
//! `peers` lists every cluster member, this server included. Without it the
//! server forms a cluster of one. Unknown keys are rejected.

use std::net::SocketAddr;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use migrant_core::engine::{BatchPolicy, ConflationPolicy, EngineConfig};
use migrant_core::ServerId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub node_id: ServerId,
    pub listen_address: SocketAddr,
    pub admin_address: Option<SocketAddr>,
    /// Every member with its listen address, this server included.
    pub peers: Vec<(ServerId, SocketAddr)>,
    pub engine: EngineConfig,
    pub session_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            node_id: ServerId(1),
            listen_address: SocketAddr::from(([127, 0, 0, 1], 7001)),
            admin_address: None,
            peers: Vec::new(),
            engine: EngineConfig { batch: BatchPolicy { max_delay: Duration::ZERO, max_bytes: 64 << 10 }, ..EngineConfig::default() },
            session_timeout: Duration::from_secs(5),
        }
    }
}

fn parse_peers(v: &str) -> Result<Vec<(ServerId, SocketAddr)>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (id, addr) = p.split_once('@').ok_or_else(|| format!("peer `{p}` must look like 2@host:port"))?;
            let id: u16 = id.trim().parse().map_err(|_| format!("bad peer id in `{p}`"))?;
            let addr: SocketAddr = addr.trim().parse().map_err(|_| format!("bad peer address in `{p}`"))?;
            Ok((ServerId(id), addr))
        })
        .collect()
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad number `{v}`"))
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        std::fs::read_to_string(path)?.parse()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let e = &mut self.engine;
        let ms = |v: &str| num::<u64>(v).map(Duration::from_millis);
        match key {
            "node_id" => self.node_id = ServerId(num(value)?),
            "listen_address" => self.listen_address = value.parse().map_err(|_| format!("bad address `{value}`"))?,
            "admin_address" => {
                self.admin_address = Some(value.parse().map_err(|_| format!("bad address `{value}`"))?)
            }
            "peers" => self.peers = parse_peers(value)?,
            "io_threads" => e.io_threads = num(value)?,
            "workers" => e.workers = num(value)?,
            "num_groups" => e.num_groups = num(value)?,
            "cache_depth" => e.cache_depth = num(value)?,
            "batch_max_delay_ms" => e.batch.max_delay = ms(value)?,
            "batch_max_bytes" => e.batch.max_bytes = num(value)?,
            "conflation_window_ms" => {
                let w = ms(value)?;
                e.conflation = (!w.is_zero()).then_some(ConflationPolicy { window: w });
            }
            "max_outbound_bytes" => e.max_outbound_bytes = num(value)?,
            "max_connections" => e.max_connections = num(value)?,
            "session_timeout_ms" => self.session_timeout = ms(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let e = &self.engine;
        if e.io_threads == 0 || e.workers == 0 {
            return bad("io_threads and workers must be at least 1".into());
        }
        if e.num_groups == 0 || e.cache_depth == 0 {
            return bad("num_groups and cache_depth must be at least 1".into());
        }
        if u32::try_from(e.workers).is_err() {
            return bad("too many workers".into());
        }
        if !self.peers.is_empty() && !self.peers.iter().any(|(id, _)| *id == self.node_id) {
            return bad(format!("peers must include this server ({})", self.node_id));
        }
        let mut ids: Vec<u16> = self.peers.iter().map(|(id, _)| id.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate peer id".into());
        }
        Ok(())
    }

    /// Every member id, this server included.
    pub fn members(&self) -> Vec<ServerId> {
        if self.peers.is_empty() {
            vec![self.node_id]
        } else {
            self.peers.iter().map(|(id, _)| *id).collect()
        }
    }

    /// Other members and where to reach them.
    pub fn remote_peers(&self) -> Vec<(ServerId, SocketAddr)> {
        self.peers.iter().copied().filter(|(id, _)| *id != self.node_id).collect()
    }
}

impl FromStr for ServerConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = ServerConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| ConfigError::Parse { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err(format!("expected key = value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(parse_err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_key() {
        let text = "node_id = 2\nlisten_address = 127.0.0.1:7002\nadmin_address = 127.0.0.1:8002\n\
                    peers = 1@127.0.0.1:7001, 2@127.0.0.1:7002\nio_threads = 2\nworkers = 3\nnum_groups = 10\n\
                    cache_depth = 5\nbatch_max_delay_ms = 10\nbatch_max_bytes = 100\nconflation_window_ms = 50\n\
                    max_outbound_bytes = 1000\nmax_connections = 7\nsession_timeout_ms = 900 # trailing\n";
        let c: ServerConfig = text.parse().unwrap();
        assert_eq!(c.node_id, ServerId(2));
        assert_eq!(c.members(), vec![ServerId(1), ServerId(2)]);
        assert_eq!(c.remote_peers(), vec![(ServerId(1), "127.0.0.1:7001".parse().unwrap())]);
        assert_eq!((c.engine.io_threads, c.engine.workers, c.engine.num_groups), (2, 3, 10));
        assert_eq!(c.engine.batch, BatchPolicy { max_delay: Duration::from_millis(10), max_bytes: 100 });
        assert_eq!(c.engine.conflation, Some(ConflationPolicy { window: Duration::from_millis(50) }));
        assert_eq!(c.session_timeout, Duration::from_millis(900));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!("bogus = 1".parse::<ServerConfig>(), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!("workers = 0".parse::<ServerConfig>(), Err(ConfigError::Invalid(_))));
        assert!("node_id = 3\npeers = 1@127.0.0.1:1".parse::<ServerConfig>().is_err());
        assert!("no equals sign".parse::<ServerConfig>().is_err());
    }

    #[test]
    fn standalone_by_default() {
        let c: ServerConfig = "".parse().unwrap();
        assert_eq!(c.members(), vec![ServerId(1)]);
        assert!(c.remote_peers().is_empty());
    }
}
