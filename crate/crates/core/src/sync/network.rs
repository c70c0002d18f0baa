use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_interval, decode_batch, encode_batch, ApplyOutcome, ReplicaState, SyncBatch, SyncError};
use crate::attention::UserId;
use crate::voxel::VoxelIndex;

/// Reliable in-process transport with seeded latency, optional duplication
/// and optional per-link ordering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkModel {
    pub latency_min_ms: f64,
    pub latency_max_ms: f64,
    /// Probability that a send produces one extra copy.
    pub duplication_rate: f64,
    /// Deliver each (sender, receiver) link in send order.
    pub in_order: bool,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            latency_min_ms: 50.0,
            latency_max_ms: 150.0,
            duplication_rate: 0.0,
            in_order: false,
        }
    }
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.latency_min_ms >= 0.0 && self.latency_min_ms <= self.latency_max_ms && self.latency_max_ms.is_finite()) {
            return Err(format!(
                "latency range {}..{} ms is invalid",
                self.latency_min_ms, self.latency_max_ms
            ));
        }
        if !(0.0..=1.0).contains(&self.duplication_rate) {
            return Err(format!("duplication_rate {} outside [0, 1]", self.duplication_rate));
        }
        Ok(())
    }

    pub fn max_latency_us(&self) -> u64 {
        ms_to_us(self.latency_max_ms)
    }
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

/// A frame arriving at a receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub at_us: u64,
    pub from: UserId,
    pub to: UserId,
    pub seq: u64,
    pub duplicate: bool,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InFlight {
    key: (u64, u64),
    delivery: Delivery,
}

impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

pub struct Network {
    model: NetworkModel,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<InFlight>>,
    counter: u64,
    link_clock: BTreeMap<(UserId, UserId), u64>,
}

impl Network {
    pub fn new(model: NetworkModel, seed: u64) -> Self {
        Self::from_rng(model, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(model: NetworkModel, rng: ChaCha8Rng) -> Self {
        Self {
            model,
            rng,
            queue: BinaryHeap::new(),
            counter: 0,
            link_clock: BTreeMap::new(),
        }
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    fn latency_us(&mut self) -> u64 {
        let lo = ms_to_us(self.model.latency_min_ms);
        let hi = ms_to_us(self.model.latency_max_ms);
        if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..=hi)
        }
    }

    fn enqueue(&mut self, now_us: u64, from: UserId, to: UserId, seq: u64, duplicate: bool, frame: Vec<u8>) {
        let mut at_us = now_us + self.latency_us();
        if self.model.in_order {
            let last = self.link_clock.entry((from, to)).or_insert(0);
            at_us = at_us.max(*last);
            *last = at_us;
        }
        self.counter += 1;
        self.queue.push(Reverse(InFlight {
            key: (at_us, self.counter),
            delivery: Delivery {
                at_us,
                from,
                to,
                seq,
                duplicate,
                frame,
            },
        }));
    }

    /// Queues one frame to each receiver, plus a seeded duplicate per
    /// receiver at `duplication_rate`.
    pub fn send(&mut self, now_us: u64, from: UserId, seq: u64, frame: &[u8], receivers: &[UserId]) {
        for &to in receivers {
            self.enqueue(now_us, from, to, seq, false, frame.to_vec());
            if self.model.duplication_rate > 0.0 && self.rng.random_bool(self.model.duplication_rate) {
                self.enqueue(now_us, from, to, seq, true, frame.to_vec());
            }
        }
    }

    pub fn next_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(f)| f.key.0)
    }

    /// Next delivery due at or before `now_us`.
    pub fn pop_due(&mut self, now_us: u64) -> Option<Delivery> {
        if self.next_time()? <= now_us {
            self.queue.pop().map(|Reverse(f)| f.delivery)
        } else {
            None
        }
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledCapture {
    pub time_us: u64,
    pub user: UserId,
    pub deltas: Vec<(VoxelIndex, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncSchedule {
    pub flush_interval_ms: u32,
    /// Captures beyond this time are rejected; flushing continues past it
    /// until every outbox and link is drained.
    pub end_us: u64,
    pub captures: Vec<ScheduledCapture>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetEvent {
    Capture { at_us: u64, user: UserId, deltas: usize },
    Flush { at_us: u64, user: UserId, seq: u64, entries: usize },
    Deliver { at_us: u64, from: UserId, to: UserId, seq: u64, outcome: ApplyOutcome },
}

impl fmt::Display for NetEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetEvent::Capture { at_us, user, deltas } => write!(f, "{at_us} capture {user} {deltas}"),
            NetEvent::Flush { at_us, user, seq, entries } => write!(f, "{at_us} flush {user} {seq} {entries}"),
            NetEvent::Deliver { at_us, from, to, seq, outcome } => {
                let o = match outcome {
                    ApplyOutcome::Applied { drained } => format!("applied+{drained}"),
                    ApplyOutcome::Buffered => "buffered".into(),
                    ApplyOutcome::Duplicate => "duplicate".into(),
                };
                write!(f, "{at_us} deliver {from}->{to} {seq} {o}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub log: Vec<NetEvent>,
    /// Every batch flushed, in flush order.
    pub batches: Vec<SyncBatch>,
    pub replicas: Vec<ReplicaState>,
    /// Largest observed age of a capture not yet applied at some peer.
    pub max_lag_us: u64,
    /// Audit points where that age exceeded flush interval + max latency.
    pub staleness_violations: usize,
    pub end_us: u64,
}

/// Tracks, per origin, which seq each capture was shipped in, so the age
/// of the oldest capture a peer has not yet applied can be looked up.
#[derive(Debug, Default)]
pub(crate) struct StalenessAudit {
    /// Per origin: (capture time, seq or MAX while unflushed), time-ordered.
    captures: BTreeMap<UserId, Vec<(u64, u64)>>,
    unflushed_from: BTreeMap<UserId, usize>,
    pub max_lag_us: u64,
    pub violations: usize,
}

impl StalenessAudit {
    pub fn record_capture(&mut self, user: UserId, at_us: u64) {
        self.captures.entry(user).or_default().push((at_us, u64::MAX));
    }

    pub fn record_flush(&mut self, user: UserId, seq: u64) {
        let list = self.captures.entry(user).or_default();
        let from = self.unflushed_from.entry(user).or_insert(0);
        for c in &mut list[*from..] {
            c.1 = seq;
        }
        *from = list.len();
    }

    pub fn check(&mut self, now_us: u64, bound_us: u64, replicas: &[ReplicaState]) {
        for peer in replicas {
            for (&origin, list) in &self.captures {
                if origin == peer.user() {
                    continue;
                }
                let applied = peer.applied_seq(origin);
                let idx = list.partition_point(|&(_, seq)| seq <= applied);
                if let Some(&(t, _)) = list.get(idx) {
                    let lag = now_us.saturating_sub(t);
                    self.max_lag_us = self.max_lag_us.max(lag);
                    if lag > bound_us {
                        self.violations += 1;
                    }
                }
            }
        }
    }
}

/// Runs replicas against a seeded network until quiescence.
///
/// Flushes happen at every multiple of the flush interval. At equal times,
/// due deliveries run first, then captures, then flushes in replica order.
pub fn simulate_network(
    mut replicas: Vec<ReplicaState>,
    model: &NetworkModel,
    schedule: &SyncSchedule,
    seed: u64,
) -> Result<SimOutcome, SyncError> {
    check_interval(schedule.flush_interval_ms)?;
    model.validate().map_err(SyncError::Codec)?;
    let flush_us = schedule.flush_interval_ms as u64 * 1000;
    let bound_us = flush_us + model.max_latency_us();
    let users: Vec<UserId> = replicas.iter().map(ReplicaState::user).collect();
    let index: BTreeMap<UserId, usize> = users.iter().enumerate().map(|(i, &u)| (u, i)).collect();

    let mut captures = schedule.captures.clone();
    captures.sort_by_key(|c| c.time_us);
    if let Some(c) = captures.iter().find(|c| c.time_us > schedule.end_us || !index.contains_key(&c.user)) {
        return Err(SyncError::Codec(format!(
            "capture for user {} at {} us is outside the schedule",
            c.user, c.time_us
        )));
    }

    let mut net = Network::new(*model, seed);
    let mut log = Vec::new();
    let mut batches = Vec::new();
    let mut audit = StalenessAudit::default();
    let mut next_capture = 0;
    let mut next_flush = flush_us;
    let mut now = 0u64;

    loop {
        let drained = next_capture == captures.len() && net.is_idle() && replicas.iter().all(|r| !r.has_unflushed());
        if drained {
            break;
        }
        let t_capture = captures.get(next_capture).map(|c| c.time_us);
        let t = [net.next_time(), t_capture, Some(next_flush)]
            .into_iter()
            .flatten()
            .min()
            .expect("flush time always present");
        if t > now {
            audit.check(now, bound_us, &replicas);
            now = t;
        }
        if let Some(d) = net.pop_due(now) {
            let (batch, _) = decode_batch(&d.frame)?;
            let outcome = replicas[index[&d.to]].apply_batch(&batch)?;
            log.push(NetEvent::Deliver {
                at_us: now,
                from: d.from,
                to: d.to,
                seq: d.seq,
                outcome,
            });
        } else if t_capture == Some(now) {
            let c = &captures[next_capture];
            next_capture += 1;
            replicas[index[&c.user]].record_local(&c.deltas, us_to_s(now))?;
            audit.record_capture(c.user, now);
            log.push(NetEvent::Capture {
                at_us: now,
                user: c.user,
                deltas: c.deltas.len(),
            });
        } else {
            for i in 0..replicas.len() {
                if let Some(batch) = replicas[i].flush(us_to_s(now)) {
                    let user = users[i];
                    audit.record_flush(user, batch.seq);
                    log.push(NetEvent::Flush {
                        at_us: now,
                        user,
                        seq: batch.seq,
                        entries: batch.entries.len(),
                    });
                    let peers: Vec<UserId> = users.iter().copied().filter(|&u| u != user).collect();
                    net.send(now, user, batch.seq, &encode_batch(&batch), &peers);
                    batches.push(batch);
                }
            }
            next_flush += flush_us;
        }
    }
    audit.check(now, bound_us, &replicas);

    Ok(SimOutcome {
        log,
        batches,
        replicas,
        max_lag_us: audit.max_lag_us,
        staleness_violations: audit.violations,
        end_us: now,
    })
}

pub(crate) fn us_to_s(us: u64) -> f64 {
    us as f64 / 1e6
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CaptureConfig;
    use crate::geometry::{Aabb, Vec3};
    use crate::voxel::VoxelGrid;

    fn grid() -> VoxelGrid {
        let b = Aabb::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap();
        let active: Vec<_> = (0..8).map(|i| VoxelIndex::new(i, 0, 0)).collect();
        VoxelGrid::with_active(b, [8, 1, 1], active).unwrap()
    }

    fn schedule() -> SyncSchedule {
        let captures = (0..40)
            .map(|n| ScheduledCapture {
                time_us: n * 37_000,
                user: (n % 2) as UserId,
                deltas: vec![(VoxelIndex::new((n % 8) as u16, 0, 0), 1.0)],
            })
            .collect();
        SyncSchedule {
            flush_interval_ms: 250,
            end_us: 2_000_000,
            captures,
        }
    }

    fn replicas(g: &VoxelGrid) -> Vec<ReplicaState> {
        (0..2).map(|u| ReplicaState::new(u, g, &CaptureConfig::default())).collect()
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let g = grid();
        let model = NetworkModel {
            duplication_rate: 0.3,
            ..NetworkModel::default()
        };
        let a = simulate_network(replicas(&g), &model, &schedule(), 9).unwrap();
        let b = simulate_network(replicas(&g), &model, &schedule(), 9).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.staleness_violations, 0);
        assert!(a.log.iter().any(|e| matches!(e, NetEvent::Deliver { outcome: ApplyOutcome::Duplicate, .. })));
    }

    #[test]
    fn zero_latency_matches_direct_calls() {
        let g = grid();
        let model = NetworkModel {
            latency_min_ms: 0.0,
            latency_max_ms: 0.0,
            ..NetworkModel::default()
        };
        let out = simulate_network(replicas(&g), &model, &schedule(), 1).unwrap();

        let mut direct = replicas(&g);
        let sched = schedule();
        let mut next = 0;
        let mut t = 250_000;
        while next < sched.captures.len() {
            while next < sched.captures.len() && sched.captures[next].time_us <= t {
                let c = &sched.captures[next];
                direct[c.user as usize].record_local(&c.deltas, us_to_s(c.time_us)).unwrap();
                next += 1;
            }
            for i in 0..2 {
                if let Some(b) = direct[i].flush(us_to_s(t)) {
                    direct[1 - i].apply_batch(&b).unwrap();
                }
            }
            t += 250_000;
        }
        for (x, y) in out.replicas.iter().zip(&direct) {
            assert_eq!(x.committed_snapshots(5.0).unwrap(), y.committed_snapshots(5.0).unwrap());
        }
        assert!(out.max_lag_us < 250_000);
    }

    #[test]
    fn in_order_links_never_buffer() {
        let g = grid();
        let model = NetworkModel {
            latency_min_ms: 0.0,
            latency_max_ms: 500.0,
            in_order: true,
            ..NetworkModel::default()
        };
        let out = simulate_network(replicas(&g), &model, &schedule(), 4).unwrap();
        assert!(!out.log.iter().any(|e| matches!(e, NetEvent::Deliver { outcome: ApplyOutcome::Buffered, .. })));
    }

    #[test]
    fn rejects_bad_interval() {
        let g = grid();
        let mut s = schedule();
        s.flush_interval_ms = 100;
        assert!(matches!(
            simulate_network(replicas(&g), &NetworkModel::default(), &s, 0),
            Err(SyncError::BadInterval(100))
        ));
    }
}
