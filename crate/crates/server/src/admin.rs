//! HTTP/JSON admin API.
//!
//! | Method | Path | Body / query | Reply |
//! |---|---|---|---|
//! | GET | `/health` | | `{"status":"ok","accepting_clients":bool}` |
//! | GET | `/stats` | | [`StatsSnapshot`](crate::StatsSnapshot) |
//! | GET | `/cluster` | | node status |
//! | POST | `/publish` | [`PublishBody`] | [`PublishReply`] |
//! | GET | `/topics/{topic}/history` | `?after=epoch.seq` | [`HistoryReply`] |
//!
//! Topic names containing `/` must be percent-encoded in the path.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use migrant_core::wire::{Frame, Publish};
use migrant_core::{MsgId, OrderKey, TopicName};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::{ClusterMsg, Shared};

/// How long `/publish` keeps retrying a publication that was refused.
const PUBLISH_PATIENCE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PublishBody {
    pub topic: String,
    /// UTF-8 payload.
    pub payload: String,
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
pub struct HistoryReply {
    pub topic: String,
    /// Messages after the requested key were evicted from the cache.
    pub truncated: bool,
    pub messages: Vec<HistoryEntry>,
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    after: Option<String>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

pub(crate) fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/stats", get(stats))
        .route("/cluster", get(cluster))
        .route("/publish", post(publish))
        .route("/topics/{topic}/history", get(history))
        .with_state(shared)
}

async fn health(State(s): State<Arc<Shared>>) -> Response {
    let accepting = s.accepting.load(std::sync::atomic::Ordering::Acquire);
    Json(serde_json::json!({ "status": "ok", "accepting_clients": accepting })).into_response()
}

async fn stats(State(s): State<Arc<Shared>>) -> Response {
    Json(s.stats()).into_response()
}

async fn cluster(State(s): State<Arc<Shared>>) -> Response {
    let (tx, rx) = oneshot::channel();
    if s.cluster.send(ClusterMsg::Status(tx)).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
    }
    match rx.await {
        Ok(st) => Json(st).into_response(),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "shutting down"),
    }
}

async fn publish(State(s): State<Arc<Shared>>, Json(body): Json<PublishBody>) -> Response {
    let topic = match TopicName::new(&body.topic) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if body.payload.len() > migrant_core::message::MAX_PAYLOAD {
        return error(StatusCode::PAYLOAD_TOO_LARGE, "payload too large");
    }
    let msg_id = next_msg_id(&s);
    let publish = Publish { topic, msg_id, ack_requested: true, payload: Bytes::from(body.payload) };
    let deadline = tokio::time::Instant::now() + PUBLISH_PATIENCE;
    loop {
        let (tx, rx) = oneshot::channel();
        if s.cluster.send(ClusterMsg::LocalPublish { publish: publish.clone(), reply: tx }).is_err() {
            return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
        }
        let last = match rx.await {
            Ok(Frame::PubAck { key, .. }) => {
                return Json(PublishReply { msg_id: msg_id.to_string(), key }).into_response();
            }
            Ok(Frame::PubNack { reason, owner, .. }) => format!("refused: {reason:?}, owner {owner:?}"),
            Ok(other) => format!("unexpected reply {:?}", other.kind()),
            Err(_) => "no reply".to_string(),
        };
        if tokio::time::Instant::now() >= deadline {
            return error(StatusCode::SERVICE_UNAVAILABLE, last);
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

/// Unique per server: node id, wall-clock nanos and a counter.
fn next_msg_id(s: &Shared) -> MsgId {
    let n = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let wall = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    MsgId((u128::from(s.cfg.node_id.0) << 112) | ((wall & ((1 << 80) - 1)) << 32) | u128::from(n as u32))
}

static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

async fn history(State(s): State<Arc<Shared>>, Path(topic): Path<String>, Query(q): Query<HistoryQuery>) -> Response {
    let name = match TopicName::new(&topic) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let after = match q.after.as_deref() {
        None => OrderKey::ORIGIN,
        Some(a) => match a.parse::<OrderKey>() {
            Ok(k) => k,
            Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
        },
    };
    let read = s.cache.read_after(&name, after);
    let messages = read
        .messages
        .iter()
        .map(|m| HistoryEntry {
            key: m.key,
            msg_id: m.msg_id.to_string(),
            payload: String::from_utf8_lossy(&m.payload).into_owned(),
        })
        .collect();
    Json(HistoryReply { topic, truncated: read.truncated, messages }).into_response()
}
