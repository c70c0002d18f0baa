use std::collections::BTreeMap;

use super::agent::{Agent, ClassificationView, ToggleProcess};
use super::environment::generate_environment;
use super::trace::{sha256_hex, TargetRecord, Trace, TraceEvent, TraceHeader};
use super::{check_discovery, place_targets, seed_stream, Condition, DiscoveryParams, SessionConfig, SessionError, Target};
use crate::attention::{GazeSample, UserId};
use crate::geometry::{Bvh, Ray, TriangleMesh};
use crate::metrics::{compute_report, GainBaseline, MetricsContext, MetricsReport};
use crate::sync::{decode_batch, encode_batch, Network, ReplicaState, SyncBatch};
use crate::voxel::{dims_for_resolution, padded_bounds, VoxelGrid};

/// Everything a session derives from its config before the first tick.
pub struct SessionWorld {
    pub config: SessionConfig,
    pub mesh: TriangleMesh,
    pub bvh: Bvh,
    pub grid: VoxelGrid,
    pub targets: Vec<Target>,
}

pub fn build_world(cfg: &SessionConfig) -> Result<SessionWorld, SessionError> {
    cfg.validate()?;
    let env_seed = cfg.environment.seed_override().unwrap_or(cfg.seed);
    let mesh = generate_environment(&cfg.environment, &mut seed_stream(env_seed, "environment"))?;
    let bvh = Bvh::build(&mesh)?;
    let bounds = padded_bounds(&mesh.aabb());
    let dims = cfg.dims.unwrap_or_else(|| dims_for_resolution(&bounds, cfg.resolution));
    let grid = VoxelGrid::voxelize_in(&mesh, &bvh, bounds, dims)?;
    let targets = place_targets(&grid, &mesh, &bvh, cfg.target_fraction, &mut seed_stream(cfg.seed, "targets"))?;
    Ok(SessionWorld {
        config: cfg.clone(),
        mesh,
        bvh,
        grid,
        targets,
    })
}

impl SessionWorld {
    pub fn header(&self) -> TraceHeader {
        let config_json = self.config.to_json();
        TraceHeader {
            engine: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: sha256_hex(config_json.as_bytes()),
            config_json,
            dims: self.grid.dims(),
            active_count: self.grid.active_count(),
            grid_digest: sha256_hex(self.grid.export_text().as_bytes()),
            targets: self
                .targets
                .iter()
                .map(|t| TargetRecord {
                    voxel: t.voxel,
                    center: t.center,
                })
                .collect(),
        }
    }
}

/// Replica and target state shared by live runs and replay. Every state
/// change goes through here so both paths emit identical events.
struct Core<'w> {
    world: &'w SessionWorld,
    replicas: Vec<ReplicaState>,
    targets: Vec<Target>,
    toggles: Vec<bool>,
    discovery: DiscoveryParams,
    threshold: f64,
}

fn secs(t_us: u64) -> f64 {
    t_us as f64 / 1e6
}

impl<'w> Core<'w> {
    fn new(world: &'w SessionWorld) -> Self {
        let cfg = &world.config;
        Self {
            world,
            replicas: (0..cfg.policies.len() as UserId)
                .map(|u| ReplicaState::new(u, &world.grid, &cfg.capture))
                .collect(),
            targets: world.targets.clone(),
            toggles: vec![false; cfg.policies.len()],
            discovery: DiscoveryParams::from_config(cfg),
            threshold: cfg.explored_threshold(),
        }
    }

    fn view_allowed(&self, user: UserId) -> bool {
        self.world.config.condition == Condition::Caav && self.toggles[user as usize]
    }

    fn view(&self, user: UserId, t: f64) -> ClassificationView<'_> {
        if !self.view_allowed(user) {
            return ClassificationView::empty();
        }
        let partner = 1 - user;
        ClassificationView::new(
            self.replicas[user as usize].live(),
            self.replicas[user as usize].committed(partner),
            self.threshold,
            t,
        )
    }

    fn gaze(&mut self, t_us: u64, user: UserId, ray: Ray, out: &mut Vec<TraceEvent>) -> Result<(), SessionError> {
        let sample = GazeSample {
            user,
            time: secs(t_us),
            ray,
        };
        let grid = &self.world.grid;
        let hit = grid.nearest_active_hit(&ray);
        let deltas = self.replicas[user as usize].capture(grid, &sample)?;
        out.push(TraceEvent::Gaze {
            t_us,
            user,
            origin: ray.origin,
            direction: ray.direction,
        });
        out.push(TraceEvent::Capture { t_us, user, hit, deltas });
        for idx in check_discovery(&sample, &self.targets, &self.discovery) {
            self.targets[idx].discovered_by = Some(user);
            self.targets[idx].discovery_time = Some(sample.time);
            out.push(TraceEvent::Discover { t_us, user, target: idx });
        }
        Ok(())
    }

    fn flush(&mut self, t_us: u64, user: UserId) -> Option<(SyncBatch, TraceEvent)> {
        let batch = self.replicas[user as usize].flush(secs(t_us))?;
        let event = TraceEvent::Flush {
            t_us,
            user,
            seq: batch.seq,
            entries: batch.entries.len(),
        };
        Some((batch, event))
    }

    fn deliver(&mut self, t_us: u64, to: UserId, batch: &SyncBatch) -> Result<TraceEvent, SessionError> {
        let outcome = self.replicas[to as usize].apply_batch(batch)?;
        Ok(TraceEvent::Deliver {
            t_us,
            from: batch.origin,
            to,
            seq: batch.seq,
            outcome,
        })
    }

    fn quiescent(&self) -> bool {
        self.replicas.iter().all(|r| !r.has_unflushed() && r.pending_count() == 0)
    }
}

pub struct SessionOutput {
    pub trace: Trace,
    pub report: MetricsReport,
}

/// Runs one session to completion: `duration × capture_rate` ticks per
/// user, flushes every sync interval, then flushes and drains the network
/// until every replica holds every batch.
///
/// At equal timestamps deliveries come first, then the tick, then flushes.
/// Within a tick users act in id order: toggle, policy read, gaze.
pub fn run_session(cfg: &SessionConfig) -> Result<SessionOutput, SessionError> {
    let world = build_world(cfg)?;
    run_in_world(&world)
}

pub(crate) fn run_in_world(world: &SessionWorld) -> Result<SessionOutput, SessionError> {
    let cfg = &world.config;
    let users = cfg.policies.len() as UserId;
    let dt = 1.0 / cfg.capture.capture_rate_hz;
    let bounds = world.grid.bounds();
    let mut agents: Vec<Agent> = cfg
        .policies
        .iter()
        .enumerate()
        .map(|(u, p)| {
            Agent::new(
                u as UserId,
                p.clone(),
                cfg.agent.clone(),
                bounds,
                seed_stream(cfg.seed, &format!("agents/{u}")),
            )
        })
        .collect();
    let mut toggles: Vec<ToggleProcess> = (0..users)
        .map(|u| ToggleProcess::new(&cfg.agent, dt, seed_stream(cfg.seed, &format!("toggle/{u}"))))
        .collect();
    let mut net = Network::from_rng(cfg.network, seed_stream(cfg.seed, "network"));
    let mut core = Core::new(world);
    let mut events = Vec::with_capacity(cfg.tick_count() as usize * 2 * users as usize + 1024);
    let ticks = cfg.tick_count();
    let flush_us = cfg.sync_interval_ms as u64 * 1000;
    let peers_of = |u: UserId| (0..users).filter(|&p| p != u).collect::<Vec<_>>();

    let mut n = 0;
    let mut next_flush = flush_us;
    loop {
        let tick_t = (n < ticks).then(|| cfg.tick_time_us(n));
        if tick_t.is_none() && net.is_idle() && core.quiescent() {
            break;
        }
        let t = [net.next_time(), tick_t, Some(next_flush)]
            .into_iter()
            .flatten()
            .min()
            .expect("flush time always present");
        if let Some(d) = net.pop_due(t) {
            let (batch, _) = decode_batch(&d.frame)?;
            events.push(core.deliver(t, d.to, &batch)?);
        } else if tick_t == Some(t) {
            let ts = secs(t);
            for u in 0..users {
                if cfg.condition == Condition::Caav {
                    let flipped = if n == 0 { Some(true) } else { toggles[u as usize].step() };
                    if let Some(on) = flipped {
                        core.toggles[u as usize] = on;
                        events.push(TraceEvent::Toggle { t_us: t, user: u, on });
                    }
                }
                let out = agents[u as usize].tick(t, dt, &world.grid, || core.view(u, ts));
                if let Some(nonempty) = out.consulted {
                    events.push(TraceEvent::Consult { t_us: t, user: u, nonempty });
                }
                core.gaze(t, u, out.ray, &mut events)?;
            }
            n += 1;
        } else {
            for u in 0..users {
                if let Some((batch, ev)) = core.flush(t, u) {
                    events.push(ev);
                    net.send(t, u, batch.seq, &encode_batch(&batch), &peers_of(u));
                }
            }
            next_flush += flush_us;
        }
    }

    let trace = Trace {
        header: world.header(),
        events,
        partial: false,
    };
    let report = compute_report(&trace, &MetricsContext::from_world(world))?;
    Ok(SessionOutput { trace, report })
}

/// Regenerates the world a trace was recorded in and checks it against the
/// header.
pub fn world_for_trace(trace: &Trace) -> Result<SessionWorld, SessionError> {
    let h = &trace.header;
    let fail = |message: &str| SessionError::Replay {
        event: 0,
        message: message.to_string(),
    };
    if sha256_hex(h.config_json.as_bytes()) != h.config_digest {
        return Err(fail("config digest does not match the embedded config"));
    }
    let cfg = SessionConfig::from_json(&h.config_json)?;
    let world = build_world(&cfg)?;
    let expected = world.header();
    if expected.dims != h.dims || expected.active_count != h.active_count || expected.grid_digest != h.grid_digest {
        return Err(fail("voxel grid differs from the recorded one"));
    }
    if expected.targets != h.targets {
        return Err(fail("target set differs from the recorded one"));
    }
    Ok(world)
}

/// Metrics straight from the recorded events, without re-executing them.
pub fn metrics_from_trace(trace: &Trace, baseline: GainBaseline) -> Result<MetricsReport, SessionError> {
    let world = world_for_trace(trace)?;
    let mut ctx = MetricsContext::from_world(&world);
    ctx.gain_baseline = baseline;
    Ok(compute_report(trace, &ctx)?)
}

/// Rebuilds the session from the trace's config and re-executes every
/// recorded input, requiring each recorded output to match exactly. A
/// partial trace is verified and reported up to its last complete event.
pub fn replay(trace: &Trace) -> Result<MetricsReport, SessionError> {
    let world = world_for_trace(trace)?;
    let cfg = &world.config;
    let fail = |event: usize, message: String| SessionError::Replay { event, message };

    let mut core = Core::new(&world);
    let mut batches: BTreeMap<(UserId, u64), SyncBatch> = BTreeMap::new();
    let users = cfg.policies.len();
    let ev = &trace.events;
    let mut i = 0;
    let mut scratch = Vec::new();
    while i < ev.len() {
        let user_ok = |u: UserId| (u as usize) < users;
        match &ev[i] {
            TraceEvent::Toggle { user, on, .. } => {
                if cfg.condition != Condition::Caav || !user_ok(*user) {
                    return Err(fail(i, "toggle event outside the attention condition".into()));
                }
                core.toggles[*user as usize] = *on;
                i += 1;
            }
            TraceEvent::Consult { user, nonempty, .. } => {
                if !user_ok(*user) || *nonempty != core.view_allowed(*user) {
                    return Err(fail(i, "classification read disagrees with gating".into()));
                }
                i += 1;
            }
            TraceEvent::Gaze {
                t_us,
                user,
                origin,
                direction,
            } => {
                if !user_ok(*user) {
                    return Err(fail(i, format!("unknown user {user}")));
                }
                let ray = Ray::from_unit(*origin, *direction).map_err(|e| fail(i, e.to_string()))?;
                scratch.clear();
                core.gaze(*t_us, *user, ray, &mut scratch)?;
                let available = (ev.len() - i).min(scratch.len());
                if ev[i..i + available] != scratch[..available] || (!trace.partial && available < scratch.len()) {
                    return Err(fail(i, "capture or discovery output differs".into()));
                }
                i += available;
            }
            TraceEvent::Flush { t_us, user, .. } => {
                if !user_ok(*user) {
                    return Err(fail(i, format!("unknown user {user}")));
                }
                let Some((batch, event)) = core.flush(*t_us, *user) else {
                    return Err(fail(i, "flush recorded with nothing pending".into()));
                };
                if event != ev[i] {
                    return Err(fail(i, "flushed batch differs".into()));
                }
                batches.insert((batch.origin, batch.seq), batch);
                i += 1;
            }
            TraceEvent::Deliver { t_us, from, to, seq, .. } => {
                let batch = batches
                    .get(&(*from, *seq))
                    .ok_or_else(|| fail(i, format!("delivery of unflushed batch {from}/{seq}")))?
                    .clone();
                if !user_ok(*to) || to == from {
                    return Err(fail(i, format!("bad receiver {to}")));
                }
                if core.deliver(*t_us, *to, &batch)? != ev[i] {
                    return Err(fail(i, "delivery outcome differs".into()));
                }
                i += 1;
            }
            TraceEvent::Capture { .. } | TraceEvent::Discover { .. } => {
                return Err(fail(i, "output event without a preceding gaze".into()));
            }
        }
    }

    if !trace.partial {
        if !core.quiescent() {
            return Err(fail(ev.len(), "session ended with undelivered attention".into()));
        }
        let end = secs(ev.last().map_or(0, TraceEvent::time_us));
        let reference = core.replicas[0].committed_snapshots(end)?;
        for r in &core.replicas[1..] {
            if r.committed_snapshots(end)? != reference {
                return Err(fail(ev.len(), "replicas did not converge".into()));
            }
        }
    }
    Ok(compute_report(trace, &MetricsContext::from_world(&world))?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatingAudit {
    pub reads: usize,
    pub nonempty_reads: usize,
    /// Non-empty reads while the reader's toggle was off or attention was
    /// not shown at all, plus any toggle events in the control condition.
    pub violations: usize,
}

/// Scans a trace for classification reads that leaked team attention.
pub fn audit_gating(trace: &Trace) -> Result<GatingAudit, SessionError> {
    let cfg = SessionConfig::from_json(&trace.header.config_json)?;
    let mut toggles: BTreeMap<UserId, bool> = BTreeMap::new();
    let mut audit = GatingAudit::default();
    for e in &trace.events {
        match *e {
            TraceEvent::Toggle { user, on, .. } => {
                if cfg.condition == Condition::NoCaav {
                    audit.violations += 1;
                }
                toggles.insert(user, on);
            }
            TraceEvent::Consult { user, nonempty, .. } => {
                audit.reads += 1;
                if nonempty {
                    audit.nonempty_reads += 1;
                    let on = toggles.get(&user).copied().unwrap_or(false);
                    if cfg.condition == Condition::NoCaav || !on {
                        audit.violations += 1;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(audit)
}
