use std::time::Duration;

use migrant_core::OrderKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdminError {
    #[error("request failed: {0}")]
    Http(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Status { status: u16, message: String },
}

/// Counters from `GET /stats`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ServerStats {
    pub node_id: u16,
    pub uptime_ms: u64,
    pub accepting_clients: bool,
    pub connections: usize,
    pub accepted_total: u64,
    pub refused_total: u64,
    pub slow_consumers: u64,
    pub notifications: u64,
    pub writes: u64,
    pub bytes_out: u64,
    pub publishes: u64,
    pub violations: u64,
    pub peer_frames_in: u64,
    pub peer_frames_out: u64,
    pub fenced: u64,
    pub cached_messages: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PublishReply {
    pub msg_id: String,
    pub key: OrderKey,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HistoryEntry {
    pub key: OrderKey,
    pub msg_id: String,
    pub payload: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct History {
    pub topic: String,
    pub truncated: bool,
    pub messages: Vec<HistoryEntry>,
}

/// Client for the broker's HTTP admin API.
#[derive(Debug, Clone)]
pub struct AdminClient {
    base: String,
    http: reqwest::Client,
}

/// Percent-encodes a topic for use as one path segment.
fn segment(topic: &str) -> String {
    let mut out = String::with_capacity(topic.len());
    for b in topic.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl AdminClient {
    /// `base` is like `http://127.0.0.1:8001`.
    pub fn new(base: impl Into<String>) -> Self {
        let http = reqwest::Client::builder().timeout(Duration::from_secs(10)).build().expect("http client builds");
        Self { base: base.into().trim_end_matches('/').to_string(), http }
    }

    async fn get<T: for<'de> Deserialize<'de>>(&self, path: &str) -> Result<T, AdminError> {
        let rsp = self.http.get(format!("{}{path}", self.base)).send().await?;
        Self::decode(rsp).await
    }

    async fn decode<T: for<'de> Deserialize<'de>>(rsp: reqwest::Response) -> Result<T, AdminError> {
        let status = rsp.status();
        if !status.is_success() {
            let message = rsp.text().await.unwrap_or_default();
            return Err(AdminError::Status { status: status.as_u16(), message });
        }
        Ok(rsp.json().await?)
    }

    pub async fn health(&self) -> Result<serde_json::Value, AdminError> {
        self.get("/health").await
    }

    pub async fn stats(&self) -> Result<ServerStats, AdminError> {
        self.get("/stats").await
    }

    pub async fn cluster(&self) -> Result<serde_json::Value, AdminError> {
        self.get("/cluster").await
    }

    pub async fn history(&self, topic: &str, after: Option<OrderKey>) -> Result<History, AdminError> {
        let query = after.map(|k| format!("?after={}.{}", k.epoch, k.seq)).unwrap_or_default();
        self.get(&format!("/topics/{}/history{query}", segment(topic))).await
    }

    pub async fn publish(&self, topic: &str, payload: &str) -> Result<PublishReply, AdminError> {
        let body = serde_json::json!({ "topic": topic, "payload": payload });
        let rsp = self.http.post(format!("{}/publish", self.base)).json(&body).send().await?;
        Self::decode(rsp).await
    }
}

#[cfg(test)]
mod tests {
    use super::segment;

    #[test]
    fn topics_become_one_segment() {
        assert_eq!(segment("prices/eur usd"), "prices%2Feur%20usd");
        assert_eq!(segment("plain-topic_1.x"), "plain-topic_1.x");
    }
}
