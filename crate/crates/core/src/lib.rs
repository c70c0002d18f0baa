//! Headless engine for collaborative attention-aware visualization.
//!
//! Attention is recorded per user on a voxel grid overlaid on a
//! visualization mesh, decays exponentially, is replicated between peers
//! as batched single-writer deltas, and is aggregated into team views for
//! revisualization. A deterministic two-agent simulator exercises the whole
//! pipeline on a treasure-hunt task and reports coordination metrics.

pub mod geometry;
pub mod text;
pub mod voxel;
pub mod attention;
pub mod team;
pub mod sync;
pub mod session;
pub mod metrics;
