#![allow(dead_code)]

use std::collections::BTreeMap;

use heed_core::attention::{CaptureConfig, UserId};
use heed_core::geometry::{triangle_aabb_overlap, Aabb, Point3, Ray, TriangleMesh, Vec3};
use heed_core::metrics::{GainBaseline, MetricsContext};
use heed_core::session::{Condition, TargetRecord, Trace, TraceEvent, TraceHeader};
use heed_core::sync::{NetworkModel, ReplicaState, ScheduledCapture, SimOutcome, SyncSchedule};
use heed_core::voxel::{VoxelGrid, VoxelIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_box() -> Aabb {
    Aabb::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap()
}

pub fn point_in(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> Point3 {
    Vec3::new(r.random_range(lo..hi), r.random_range(lo..hi), r.random_range(lo..hi))
}

pub fn unit_dir(r: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = point_in(r, -1.0, 1.0);
        if let Some(d) = v.try_normalize() {
            if v.length() <= 1.0 {
                return d;
            }
        }
    }
}

/// Mix of small and large triangles around the unit cube, with a few flat
/// ones at rounded heights.
pub fn random_mesh(r: &mut ChaCha8Rng, n: usize) -> TriangleMesh {
    let mut tris = Vec::with_capacity(n);
    for _ in 0..n {
        let a = point_in(r, 0.0, 1.0);
        let scale = if r.random_bool(0.7) { 0.15 } else { 0.8 };
        let mut b = a + unit_dir(r) * r.random_range(0.01..scale);
        let mut c = a + unit_dir(r) * r.random_range(0.01..scale);
        if r.random_bool(0.1) {
            let z = (a.z * 8.0).round() / 8.0;
            b.z = z;
            c.z = z;
            let a = Vec3::new(a.x, a.y, z);
            tris.push([a, b, c]);
            continue;
        }
        tris.push([a, b, c]);
    }
    TriangleMesh::from_triangles(&tris).unwrap()
}

/// Ray from outside or inside the unit cube aimed at a point inside it.
pub fn random_ray(r: &mut ChaCha8Rng) -> Ray {
    let target = point_in(r, 0.05, 0.95);
    let origin = if r.random_bool(0.2) {
        point_in(r, 0.0, 1.0)
    } else {
        target + unit_dir(r) * r.random_range(1.0..3.0)
    };
    Ray::towards(origin, target).unwrap_or_else(|_| Ray::new(origin, Vec3::X).unwrap())
}

/// Exhaustive triangle × voxel SAT loop.
pub fn brute_voxelize(mesh: &TriangleMesh, grid: &VoxelGrid) -> Vec<VoxelIndex> {
    grid.iter_indices()
        .filter(|&v| {
            let b = grid.voxel_aabb(v);
            (0..mesh.triangle_count()).any(|t| triangle_aabb_overlap(&mesh.triangle(t), &b))
        })
        .collect()
}

/// Eagerly decayed dense reference: every stored value is decayed on every
/// event.
pub struct EagerField {
    pub values: Vec<f64>,
    pub clock: f64,
    half_life: f64,
}

impl EagerField {
    pub fn new(len: usize, half_life: f64) -> Self {
        Self {
            values: vec![0.0; len],
            clock: 0.0,
            half_life,
        }
    }

    pub fn advance(&mut self, t: f64) {
        let f = (-(t - self.clock) / self.half_life).exp2();
        for v in &mut self.values {
            *v *= f;
        }
        self.clock = t;
    }

    pub fn add(&mut self, li: usize, d: f64) {
        self.values[li] += d;
    }
}

pub fn linear(dims: [usize; 3], v: VoxelIndex) -> usize {
    (v.i as usize * dims[1] + v.j as usize) * dims[2] + v.k as usize
}

/// One randomized sync trial: 2..=4 replicas on a small grid, random
/// latencies in 0..=500 ms, 10% duplication, unordered links.
pub struct SyncTrial {
    pub grid: VoxelGrid,
    pub cfg: CaptureConfig,
    pub model: NetworkModel,
    pub schedule: SyncSchedule,
    pub users: Vec<UserId>,
    pub seed: u64,
}

impl SyncTrial {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let dims = [6, 5, 4];
        let active: Vec<VoxelIndex> = (0..6u16)
            .flat_map(|i| (0..5u16).flat_map(move |j| (0..4u16).map(move |k| VoxelIndex::new(i, j, k))))
            .collect();
        let grid = VoxelGrid::with_active(unit_box(), dims, active.clone()).unwrap();
        let cfg = CaptureConfig {
            half_life: r.random_range(1.0..30.0),
            ..CaptureConfig::default()
        };
        let lo = r.random_range(0.0..=500.0f64).round();
        let hi = r.random_range(lo..=500.0f64).round();
        let model = NetworkModel {
            latency_min_ms: lo,
            latency_max_ms: hi,
            duplication_rate: 0.1,
            in_order: false,
        };
        let n_users = r.random_range(2..=4u32);
        // Ids need not be contiguous.
        let users: Vec<UserId> = (0..n_users).map(|u| u * 3 + (seed % 2) as u32).collect();
        let end_us = r.random_range(1_000_000..4_000_000u64);
        let mut captures = Vec::new();
        for &u in &users {
            let mut t = 0u64;
            loop {
                t += r.random_range(5_000..150_000u64);
                if t > end_us {
                    break;
                }
                let n = r.random_range(1..4usize);
                let deltas = (0..n)
                    .map(|_| (active[r.random_range(0..active.len())], r.random_range(0.1..2.0)))
                    .collect();
                captures.push(ScheduledCapture { time_us: t, user: u, deltas });
            }
        }
        let flush_interval_ms = [200, 250, 333, 500][r.random_range(0..4usize)];
        Self {
            grid,
            cfg,
            model,
            schedule: SyncSchedule {
                flush_interval_ms,
                end_us,
                captures,
            },
            users,
            seed,
        }
    }

    pub fn replicas(&self) -> Vec<ReplicaState> {
        self.users.iter().map(|&u| ReplicaState::new(u, &self.grid, &self.cfg)).collect()
    }
}

/// Verifies a finished trial; returns a description of the first problem.
pub fn check_trial(trial: &SyncTrial, out: &SimOutcome) -> Result<(), String> {
    let t_end = out.end_us as f64 / 1e6 + 1.0;
    // Canonical order: each origin's batches by seq on a fresh replica.
    let mut sorted = out.batches.clone();
    sorted.sort_by_key(|b| (b.origin, b.seq));
    let mut reference = ReplicaState::new(u32::MAX, &trial.grid, &trial.cfg);
    for b in &sorted {
        reference.apply_batch(b).map_err(|e| e.to_string())?;
    }
    if reference.pending_count() != 0 {
        return Err("canonical replay left gaps".into());
    }
    let want = reference.committed_snapshots(t_end).map_err(|e| e.to_string())?;
    let mut replicas = out.replicas.clone();
    for r in &replicas {
        if r.pending_count() != 0 || r.has_unflushed() {
            return Err(format!("replica {} not quiescent", r.user()));
        }
        let got = r.committed_snapshots(t_end).map_err(|e| e.to_string())?;
        let keys: Vec<_> = got.keys().collect();
        let want_keys: Vec<_> = want.keys().collect();
        if keys != want_keys {
            return Err(format!("replica {} holds origins {keys:?}, expected {want_keys:?}", r.user()));
        }
        for (u, f) in &got {
            let w = &want[u];
            let same = f.values().iter().zip(w.values()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(format!("replica {} disagrees on origin {u}", r.user()));
            }
        }
    }
    // Redelivering every batch changes nothing.
    for r in &mut replicas {
        let before = r.committed_snapshots(t_end).unwrap();
        for b in sorted.iter().rev() {
            match r.apply_batch(b) {
                Ok(heed_core::sync::ApplyOutcome::Duplicate) => {}
                other => return Err(format!("redelivery to {} gave {other:?}", r.user())),
            }
        }
        if r.committed_snapshots(t_end).unwrap() != before {
            return Err("duplicate changed state".into());
        }
    }
    if out.staleness_violations != 0 {
        return Err(format!(
            "staleness {} us exceeds bound {} us",
            out.max_lag_us,
            trial.schedule.flush_interval_ms as u64 * 1000 + trial.model.max_latency_us()
        ));
    }
    Ok(())
}

/// Random but well-formed two-user trace over `grid` with `targets`
/// targets, together with a context for it.
pub fn random_trace(seed: u64, grid: &VoxelGrid, targets: usize) -> (Trace, MetricsContext) {
    let mut r = rng(seed);
    let cfg = CaptureConfig::default();
    let dims = grid.dims();
    let active = grid.active();
    let header = TraceHeader {
        engine: "test".into(),
        config_json: "{}".into(),
        config_digest: String::new(),
        dims,
        active_count: active.len(),
        grid_digest: String::new(),
        targets: (0..targets)
            .map(|i| TargetRecord {
                voxel: active[i % active.len()],
                center: grid.voxel_center(active[i % active.len()]),
            })
            .collect(),
    };
    let mut events = Vec::new();
    let mut found = vec![false; targets];
    let ticks = r.random_range(5..80u64);
    for n in 0..ticks {
        let t_us = n * 100_000;
        for user in 0..2u32 {
            if r.random_bool(0.15) {
                events.push(TraceEvent::Toggle { t_us, user, on: r.random_bool(0.5) });
            }
            events.push(TraceEvent::Gaze {
                t_us,
                user,
                origin: Vec3::new(0.5, 0.5, 3.0),
                direction: -Vec3::Z,
            });
            let hit = r.random_bool(0.8).then(|| active[r.random_range(0..active.len())]);
            let deltas = hit.map(|v| vec![(v, cfg.center_increment)]).unwrap_or_default();
            events.push(TraceEvent::Capture { t_us, user, hit, deltas });
            if targets > 0 && r.random_bool(0.2) {
                let idx = r.random_range(0..targets);
                if !found[idx] {
                    found[idx] = true;
                    events.push(TraceEvent::Discover { t_us, user, target: idx });
                }
            }
        }
    }
    let ctx = MetricsContext {
        dims,
        active: (0..grid.len()).map(|li| grid.is_active_linear(li)).collect(),
        active_count: active.len(),
        capture: cfg,
        threshold: 0.05,
        target_count: targets,
        users: 2,
        condition: Condition::Caav,
        gain_baseline: GainBaseline::Best,
    };
    let trace = Trace {
        header,
        events,
        partial: false,
    };
    (trace, ctx)
}

pub fn count_by<K: Ord, I: IntoIterator<Item = K>>(items: I) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in items {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

/// Voxels hit by sampling the ray every `h` inside the grid, with repeats
/// collapsed.
pub fn dense_walk(grid: &VoxelGrid, ray: &Ray, h: f64) -> Vec<VoxelIndex> {
    let mut out: Vec<VoxelIndex> = Vec::new();
    let Some((t0, t1)) = grid.bounds().ray_interval(ray) else {
        return out;
    };
    // The walk includes end voxels however thin the sliver before the first
    // or after the last regular sample.
    let entry = if t0 == 0.0 { ray.origin } else { ray.at(t0 + 1e-9) };
    out.extend(grid.containing(entry));
    let mut t = t0 + 0.5 * h;
    while t < t1 {
        if let Some(v) = grid.containing(ray.at(t)) {
            if out.last() != Some(&v) {
                out.push(v);
            }
        }
        t += h;
    }
    if let Some(v) = grid.containing(ray.at(t1 - 1e-9)) {
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}

/// DDA output against [`dense_walk`] at a hundredth of the smallest voxel
/// edge. The sampled walk must appear in order inside the DDA walk; the
/// only extra voxels allowed are the ones the walk inserts where the ray
/// crosses an edge or corner within sampling distance, where the samples
/// jump diagonally.
pub fn check_traversal(grid: &VoxelGrid, ray: &Ray) -> Result<usize, String> {
    let dda = grid.traverse_ray(ray);
    for w in dda.windows(2) {
        let d: u32 = (0..3).map(|a| w[0].axis(a).abs_diff(w[1].axis(a)) as u32).sum();
        if d != 1 {
            return Err(format!("{} -> {} is not a face step", w[0], w[1]));
        }
    }
    let s = grid.voxel_size();
    let h = s.x.min(s.y).min(s.z) / 100.0;
    let dense = dense_walk(grid, ray, h);
    let mut j = 0;
    let mut extras = 0;
    for (i, v) in dda.iter().enumerate() {
        if j < dense.len() && dense[j] == *v {
            j += 1;
            continue;
        }
        extras += 1;
        let near = grid.voxel_aabb(*v).expanded(Vec3::splat(2.0 * h)).ray_interval(ray).is_some();
        let diagonal = j > 0
            && j < dense.len()
            && (0..3).filter(|&a| dense[j - 1].axis(a) != dense[j].axis(a)).count() > 1;
        if !(near && diagonal) {
            return Err(format!("unexpected voxel {v} at step {i}"));
        }
    }
    if j != dense.len() {
        return Err(format!("sampled voxel {} missing from the walk", dense[j]));
    }
    Ok(extras)
}

/// Metrics recounted straight from trace events: discoveries per user,
/// ever-explored voxels by brute-force decay sums at every capture instant,
/// and observation sets.
#[derive(Debug, PartialEq)]
pub struct CountedMetrics {
    pub found_by: Vec<usize>,
    pub found: usize,
    pub covered_by: Vec<usize>,
    pub covered_team: usize,
    pub total_obs: usize,
    pub unique_obs: usize,
}

pub fn count_metrics(trace: &Trace, ctx: &MetricsContext) -> CountedMetrics {
    use std::collections::{BTreeSet, HashSet};
    let mut found_by = vec![0; ctx.users];
    let mut found = BTreeSet::new();
    // Per voxel: every delta so far as (user, time, delta).
    let mut history: BTreeMap<VoxelIndex, Vec<(usize, f64, f64)>> = BTreeMap::new();
    let mut covered_by = vec![BTreeSet::new(); ctx.users];
    let mut covered_team = BTreeSet::new();
    let mut obs = Vec::new();
    let hl = ctx.capture.half_life;
    let ok = |x: f64| x > 0.0 && x >= ctx.threshold;
    for e in &trace.events {
        match e {
            TraceEvent::Discover { user, target, .. } => {
                found_by[*user as usize] += 1;
                found.insert(*target);
            }
            TraceEvent::Capture { t_us, user, hit, deltas } => {
                let t = *t_us as f64 / 1e6;
                let u = *user as usize;
                for &(v, d) in deltas {
                    let h = history.entry(v).or_default();
                    h.push((u, t, d));
                    if !ctx.active[linear(ctx.dims, v)] {
                        continue;
                    }
                    let value = |only: Option<usize>| -> f64 {
                        let raw: f64 = h
                            .iter()
                            .filter(|(w, _, _)| only.is_none_or(|o| o == *w))
                            .map(|&(_, s, d)| d * (-(t - s) / hl).exp2())
                            .sum();
                        raw
                    };
                    let floor = |x: f64| if x < ctx.capture.epsilon_floor { 0.0 } else { x };
                    if ok(floor(value(Some(u)))) {
                        covered_by[u].insert(v);
                    }
                    let team: f64 = (0..ctx.users).map(|w| floor(value(Some(w)))).sum();
                    if ok(team) {
                        covered_team.insert(v);
                    }
                }
                if let Some(v) = hit {
                    obs.push(*v);
                }
            }
            _ => {}
        }
    }
    CountedMetrics {
        found_by,
        found: found.len(),
        covered_by: covered_by.iter().map(BTreeSet::len).collect(),
        covered_team: covered_team.len(),
        total_obs: obs.len(),
        unique_obs: obs.iter().collect::<HashSet<_>>().len(),
    }
}
