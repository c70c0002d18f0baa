//! Single-writer replication of attention deltas.
//!
//! Each user's replica is the only writer of that user's attention. Local
//! captures are coalesced per voxel and shipped as numbered [`SyncBatch`]es;
//! receivers apply each origin's batches strictly in sequence order, drop
//! duplicates and buffer gaps. Because every replica applies the same
//! batches in the same `(origin, seq, entry)` order, quiescent replicas hold
//! bit-identical committed maps.

mod codec;
mod network;
mod replica;

pub use codec::{decode_batch, encode_batch, HEADER_LEN, ENTRY_LEN};
pub use network::{simulate_network, Delivery, NetEvent, Network, NetworkModel, ScheduledCapture, SyncSchedule, SimOutcome};
pub use replica::{ApplyOutcome, ReplicaState};

use thiserror::Error;

use crate::attention::{AttentionError, UserId};
use crate::voxel::VoxelIndex;

pub const DEFAULT_FLUSH_INTERVAL_MS: u32 = 250;
/// Accepted flush interval range in milliseconds.
pub const FLUSH_INTERVAL_RANGE_MS: std::ops::RangeInclusive<u32> = 200..=500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("malformed batch from user {origin} seq {seq}: {reason}")]
    Malformed { origin: UserId, seq: u64, reason: String },
    #[error("codec: {0}")]
    Codec(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("flush interval {0} ms outside {min}..={max}", min = FLUSH_INTERVAL_RANGE_MS.start(), max = FLUSH_INTERVAL_RANGE_MS.end())]
    BadInterval(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncEntry {
    pub voxel: VoxelIndex,
    /// Attention units, decayed to `capture_time`.
    pub delta: f64,
    /// Seconds, session-relative.
    pub capture_time: f64,
}

/// One origin's coalesced deltas since its previous flush.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncBatch {
    pub origin: UserId,
    pub seq: u64,
    pub entries: Vec<SyncEntry>,
}

impl SyncBatch {
    pub fn is_heartbeat(&self) -> bool {
        self.entries.is_empty()
    }

    /// Structural checks independent of receiver state.
    pub fn validate(&self) -> Result<(), SyncError> {
        let bad = |reason: &str| SyncError::Malformed {
            origin: self.origin,
            seq: self.seq,
            reason: reason.to_string(),
        };
        if self.seq == 0 {
            return Err(bad("seq must be positive"));
        }
        for e in &self.entries {
            if !(e.delta > 0.0 && e.delta.is_finite()) {
                return Err(bad("delta must be positive and finite"));
            }
            if !e.capture_time.is_finite() {
                return Err(bad("capture_time must be finite"));
            }
        }
        Ok(())
    }
}

pub fn check_interval(interval_ms: u32) -> Result<(), SyncError> {
    if FLUSH_INTERVAL_RANGE_MS.contains(&interval_ms) {
        Ok(())
    } else {
        Err(SyncError::BadInterval(interval_ms))
    }
}
