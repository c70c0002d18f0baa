use std::collections::BTreeMap;

use super::{SyncBatch, SyncEntry, SyncError};
use crate::attention::{capture_deltas, AttentionError, AttentionMap, CaptureConfig, Field, GazeSample, UserId};
use crate::voxel::{VoxelGrid, VoxelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    /// This batch and `drained` buffered successors were applied.
    Applied { drained: usize },
    /// Arrived ahead of a gap; held until the gap fills.
    Buffered,
    /// Already applied or already buffered.
    Duplicate,
}

/// One peer's view of the session.
///
/// `live` is the owner's own map, updated on every capture for immediate
/// feedback. `committed` holds every user's map as rebuilt from batches,
/// including the owner's own flushed batches, so that committed maps are
/// bit-identical across replicas once all batches are delivered.
#[derive(Debug, Clone)]
pub struct ReplicaState {
    user: UserId,
    dims: [usize; 3],
    cfg: CaptureConfig,
    live: AttentionMap,
    committed: BTreeMap<UserId, AttentionMap>,
    applied_seq: BTreeMap<UserId, u64>,
    pending: BTreeMap<UserId, BTreeMap<u64, SyncBatch>>,
    /// Coalesced unsent deltas: (delta decayed to time, time).
    outbox: BTreeMap<VoxelIndex, (f64, f64)>,
    next_seq: u64,
}

impl ReplicaState {
    pub fn new(user: UserId, grid: &VoxelGrid, cfg: &CaptureConfig) -> Self {
        let dims = grid.dims();
        Self {
            user,
            dims,
            cfg: *cfg,
            live: AttentionMap::with_dims(user, dims, cfg),
            committed: BTreeMap::new(),
            applied_seq: BTreeMap::new(),
            pending: BTreeMap::new(),
            outbox: BTreeMap::new(),
            next_seq: 1,
        }
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn live(&self) -> &AttentionMap {
        &self.live
    }

    /// Committed map for `user`, if any batch from them has been seen.
    pub fn committed(&self, user: UserId) -> Option<&AttentionMap> {
        self.committed.get(&user)
    }

    /// Map to read for `user`: the live map for the owner, the mirror for
    /// everyone else.
    pub fn view(&self, user: UserId) -> Option<&AttentionMap> {
        if user == self.user {
            Some(&self.live)
        } else {
            self.committed.get(&user)
        }
    }

    pub fn applied_seq(&self, user: UserId) -> u64 {
        self.applied_seq.get(&user).copied().unwrap_or(0)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.values().map(BTreeMap::len).sum()
    }

    pub fn has_unflushed(&self) -> bool {
        !self.outbox.is_empty()
    }

    /// Captures a gaze sample on the live map and queues its deltas.
    pub fn capture(&mut self, grid: &VoxelGrid, sample: &GazeSample) -> Result<Vec<(VoxelIndex, f64)>, SyncError> {
        let deltas = capture_deltas(grid, &sample.ray, &self.cfg);
        self.record_local(&deltas, sample.time)?;
        Ok(deltas)
    }

    /// Applies externally computed deltas at `time` to the live map and
    /// queues them for the next flush.
    pub fn record_local(&mut self, deltas: &[(VoxelIndex, f64)], time: f64) -> Result<(), SyncError> {
        for &(v, d) in deltas {
            let li = self.live.linear_of(v).ok_or(AttentionError::OutOfGrid(v))?;
            self.live.add_linear(li, d, time)?;
            let half_life = self.cfg.half_life;
            self.outbox
                .entry(v)
                .and_modify(|(acc, t)| {
                    *acc = *acc * (-(time - *t) / half_life).exp2() + d;
                    *t = time;
                })
                .or_insert((d, time));
        }
        Ok(())
    }

    /// Drains queued deltas into the next batch, applying it to the
    /// owner's committed map. `None` when nothing is queued.
    pub fn flush(&mut self, _now: f64) -> Option<SyncBatch> {
        if self.outbox.is_empty() {
            return None;
        }
        let entries = std::mem::take(&mut self.outbox)
            .into_iter()
            .map(|(voxel, (delta, capture_time))| SyncEntry {
                voxel,
                delta,
                capture_time,
            })
            .collect();
        let batch = SyncBatch {
            origin: self.user,
            seq: self.next_seq,
            entries,
        };
        self.next_seq += 1;
        self.commit(&batch)
            .expect("own batch is well formed and time-ordered");
        self.applied_seq.insert(self.user, batch.seq);
        Some(batch)
    }

    pub fn apply_batch(&mut self, batch: &SyncBatch) -> Result<ApplyOutcome, SyncError> {
        batch.validate()?;
        for e in &batch.entries {
            if self.live.linear_of(e.voxel).is_none() {
                return Err(SyncError::Malformed {
                    origin: batch.origin,
                    seq: batch.seq,
                    reason: format!("voxel {} outside grid", e.voxel),
                });
            }
        }
        let applied = self.applied_seq(batch.origin);
        if batch.seq <= applied
            || self
                .pending
                .get(&batch.origin)
                .is_some_and(|p| p.contains_key(&batch.seq))
        {
            return Ok(ApplyOutcome::Duplicate);
        }
        if batch.seq != applied + 1 {
            self.pending
                .entry(batch.origin)
                .or_default()
                .insert(batch.seq, batch.clone());
            return Ok(ApplyOutcome::Buffered);
        }
        self.commit(batch)?;
        let mut last = batch.seq;
        let mut drained = 0;
        if let Some(buf) = self.pending.get_mut(&batch.origin) {
            while let Some(next) = buf.remove(&(last + 1)) {
                // Buffered batches were validated on arrival.
                let origin_map = self
                    .committed
                    .get_mut(&batch.origin)
                    .expect("created by commit above");
                apply_entries(origin_map, &next)?;
                last = next.seq;
                drained += 1;
            }
            if buf.is_empty() {
                self.pending.remove(&batch.origin);
            }
        }
        self.applied_seq.insert(batch.origin, last);
        Ok(ApplyOutcome::Applied { drained })
    }

    fn commit(&mut self, batch: &SyncBatch) -> Result<(), SyncError> {
        let dims = self.dims;
        let cfg = self.cfg;
        let map = self
            .committed
            .entry(batch.origin)
            .or_insert_with(|| AttentionMap::with_dims(batch.origin, dims, &cfg));
        apply_entries(map, batch)
    }

    /// Committed fields of every known user at `t`.
    pub fn committed_snapshots(&self, t: f64) -> Result<BTreeMap<UserId, Field>, SyncError> {
        self.committed
            .iter()
            .map(|(&u, m)| Ok((u, m.snapshot(t)?)))
            .collect()
    }
}

/// Entries are applied in batch order; all are checked for clock
/// regression first so a rejected batch leaves the map untouched.
fn apply_entries(map: &mut AttentionMap, batch: &SyncBatch) -> Result<(), SyncError> {
    let mut idx = Vec::with_capacity(batch.entries.len());
    for e in &batch.entries {
        let li = map.linear_of(e.voxel).ok_or(AttentionError::OutOfGrid(e.voxel))?;
        let last = map.last_update_linear(li);
        if e.capture_time < last {
            return Err(AttentionError::ClockRegression {
                requested: e.capture_time,
                last_update: last,
            }
            .into());
        }
        idx.push(li);
    }
    for (e, li) in batch.entries.iter().zip(idx) {
        map.add_linear(li, e.delta, e.capture_time)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Vec3};

    fn grid() -> VoxelGrid {
        let bounds = Aabb::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap();
        VoxelGrid::with_active(bounds, [4, 4, 4], bounds_active()).unwrap()
    }

    fn bounds_active() -> Vec<VoxelIndex> {
        (0..4).map(|i| VoxelIndex::new(i, 0, 0)).collect()
    }

    fn cfg() -> CaptureConfig {
        CaptureConfig::default()
    }

    #[test]
    fn empty_flush_is_none() {
        let mut r = ReplicaState::new(0, &grid(), &cfg());
        assert_eq!(r.flush(0.3), None);
    }

    #[test]
    fn coalesces_per_voxel() {
        let g = grid();
        let mut r = ReplicaState::new(0, &g, &cfg());
        let a = VoxelIndex::new(0, 0, 0);
        let b = VoxelIndex::new(1, 0, 0);
        r.record_local(&[(a, 1.0)], 0.0).unwrap();
        r.record_local(&[(b, 1.0)], 0.1).unwrap();
        r.record_local(&[(a, 1.0)], 0.2).unwrap();
        let batch = r.flush(0.25).unwrap();
        assert_eq!(batch.seq, 1);
        assert_eq!(batch.entries.len(), 2);
        let ea = batch.entries[0];
        assert_eq!(ea.voxel, a);
        assert_eq!(ea.capture_time, 0.2);
        let expected = (-0.2f64 / 60.0).exp2() + 1.0;
        assert!((ea.delta - expected).abs() < 1e-15);
        assert_eq!(r.flush(0.5), None);
    }

    #[test]
    fn duplicates_and_reordering() {
        let g = grid();
        let mut src = ReplicaState::new(0, &g, &cfg());
        src.record_local(&[(VoxelIndex::new(0, 0, 0), 1.0)], 0.0).unwrap();
        let b1 = src.flush(0.25).unwrap();
        src.record_local(&[(VoxelIndex::new(0, 0, 0), 1.0), (VoxelIndex::new(2, 0, 0), 2.0)], 0.3).unwrap();
        let b2 = src.flush(0.5).unwrap();

        let mut in_order = ReplicaState::new(1, &g, &cfg());
        assert_eq!(in_order.apply_batch(&b1).unwrap(), ApplyOutcome::Applied { drained: 0 });
        assert_eq!(in_order.apply_batch(&b1).unwrap(), ApplyOutcome::Duplicate);
        in_order.apply_batch(&b2).unwrap();

        let mut reversed = ReplicaState::new(1, &g, &cfg());
        assert_eq!(reversed.apply_batch(&b2).unwrap(), ApplyOutcome::Buffered);
        assert_eq!(reversed.apply_batch(&b2).unwrap(), ApplyOutcome::Duplicate);
        assert_eq!(reversed.applied_seq(0), 0);
        assert_eq!(reversed.apply_batch(&b1).unwrap(), ApplyOutcome::Applied { drained: 1 });
        assert_eq!(reversed.applied_seq(0), 2);
        assert_eq!(reversed.pending_count(), 0);

        let x = in_order.committed_snapshots(1.0).unwrap();
        let y = reversed.committed_snapshots(1.0).unwrap();
        assert_eq!(x[&0], y[&0]);
        assert_eq!(x[&0], src.committed_snapshots(1.0).unwrap()[&0]);
    }

    #[test]
    fn malformed_batches_rejected() {
        let g = grid();
        let mut r = ReplicaState::new(1, &g, &cfg());
        let entry = SyncEntry { voxel: VoxelIndex::new(0, 0, 0), delta: 1.0, capture_time: 0.0 };
        let zero_seq = SyncBatch { origin: 0, seq: 0, entries: vec![entry] };
        assert!(matches!(r.apply_batch(&zero_seq), Err(SyncError::Malformed { .. })));
        let neg = SyncBatch { origin: 0, seq: 1, entries: vec![SyncEntry { delta: -1.0, ..entry }] };
        assert!(r.apply_batch(&neg).is_err());
        let outside = SyncBatch { origin: 0, seq: 1, entries: vec![SyncEntry { voxel: VoxelIndex::new(9, 0, 0), ..entry }] };
        assert!(r.apply_batch(&outside).is_err());
        assert_eq!(r.applied_seq(0), 0);
    }

    #[test]
    fn live_and_committed_agree_closely() {
        let g = grid();
        let mut r = ReplicaState::new(0, &g, &cfg());
        for step in 0..20 {
            let t = step as f64 * 0.1;
            r.record_local(&[(VoxelIndex::new((step % 3) as u16, 0, 0), 1.0)], t).unwrap();
            if step % 3 == 2 {
                r.flush(t);
            }
        }
        r.flush(2.0);
        let live = r.live().snapshot(2.0).unwrap();
        let committed = r.committed(0).unwrap().snapshot(2.0).unwrap();
        for (a, b) in live.values().iter().zip(committed.values()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
