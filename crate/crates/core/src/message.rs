use bytes::Bytes;

use crate::ids::{MsgId, OrderKey, TopicName};

/// Largest payload a publication may carry.
pub const MAX_PAYLOAD: usize = u16::MAX as usize;

/// A sequenced publication: the unit of ordering, caching and replication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: TopicName,
    pub key: OrderKey,
    pub payload: Bytes,
    pub msg_id: MsgId,
}

impl Message {
    pub fn new(topic: TopicName, key: OrderKey, payload: impl Into<Bytes>, msg_id: MsgId) -> Self {
        Self { topic, key, payload: payload.into(), msg_id }
    }
}
