//! Benchmark payloads: an 8-byte big-endian send timestamp (nanoseconds
//! since the Unix epoch) followed by random filler.

use std::time::{SystemTime, UNIX_EPOCH};

use bytes::{BufMut, Bytes, BytesMut};
use rand::RngCore;

pub const TIMESTAMP_LEN: usize = 8;
pub const DEFAULT_SIZE: usize = 140;

pub fn wall_nanos() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64)
}

/// A payload of exactly `size` bytes, or of [`TIMESTAMP_LEN`] bytes when
/// `size` is smaller.
pub fn encode<R: RngCore + ?Sized>(sent_at: u64, size: usize, rng: &mut R) -> Bytes {
    let size = size.max(TIMESTAMP_LEN);
    let mut b = BytesMut::with_capacity(size);
    b.put_u64(sent_at);
    b.resize(size, 0);
    rng.fill_bytes(&mut b[TIMESTAMP_LEN..]);
    b.freeze()
}

pub fn timestamp(payload: &[u8]) -> Option<u64> {
    Some(u64::from_be_bytes(payload.get(..TIMESTAMP_LEN)?.try_into().ok()?))
}

/// Milliseconds from the embedded timestamp to `received_at`. Publisher
/// and subscriber must share a clock, i.e. run on one machine.
pub fn latency_ms(payload: &[u8], received_at: u64) -> Option<f64> {
    let sent = timestamp(payload)?;
    Some(received_at.saturating_sub(sent) as f64 / 1e6)
}
