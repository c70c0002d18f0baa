//! Kinematic search agents.
//!
//! An agent walks a slow random orbit around the visualization and moves
//! its head ray toward a fixation point at a bounded angular speed. Once
//! there it dwells, with small jitter, then asks its policy for the next
//! fixation.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, UserId};
use crate::geometry::{Aabb, Point3, Ray, Vec3};
use crate::team::{classify_explored, VoxelClass};
use crate::voxel::{VoxelGrid, VoxelIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentPolicy {
    /// Cycles through fixed fixation points.
    Scripted { waypoints: Vec<[f64; 3]> },
    /// Uniformly random active voxels.
    RandomScan,
    /// Prefers the candidate region with the most unexplored voxels. A short
    /// memory of its own fixations is always used; the team classification
    /// is added when it is visible.
    Coordinated,
}

impl AgentPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AgentPolicy::Scripted { .. } => "scripted",
            AgentPolicy::RandomScan => "random_scan",
            AgentPolicy::Coordinated => "coordinated",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let AgentPolicy::Scripted { waypoints } = self {
            if waypoints.is_empty() || waypoints.iter().flatten().any(|x| !x.is_finite()) {
                return Err("scripted policy needs finite waypoints".into());
            }
        }
        Ok(())
    }

    pub fn reads_team_view(&self) -> bool {
        matches!(self, AgentPolicy::Coordinated)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentParams {
    /// Horizontal distance of the head from the visualization center, m.
    pub orbit_radius: f64,
    /// Head height above the top of the visualization bounds, m.
    pub eye_height: f64,
    /// rad/s.
    pub orbit_speed_max: f64,
    /// rad/s².
    pub orbit_accel: f64,
    /// rad/s.
    pub gaze_speed_max: f64,
    /// Seconds.
    pub dwell_min: f64,
    pub dwell_max: f64,
    /// Per-axis head jitter while dwelling, rad.
    pub jitter: f64,
    pub candidates: usize,
    /// Own fixations remembered.
    pub memory: usize,
    /// Half-width in voxels of the region a candidate is scored over.
    pub neighbourhood: u16,
    /// Mean toggle on/off spell lengths, seconds.
    pub toggle_mean_on: f64,
    pub toggle_mean_off: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            orbit_radius: 1.3,
            eye_height: 0.35,
            orbit_speed_max: 0.3,
            orbit_accel: 0.15,
            gaze_speed_max: 2.5,
            dwell_min: 0.8,
            dwell_max: 2.0,
            jitter: 0.006,
            candidates: 12,
            memory: 16,
            neighbourhood: 2,
            toggle_mean_on: 13.5,
            toggle_mean_off: 4.5,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = [
            self.orbit_radius,
            self.eye_height,
            self.orbit_speed_max,
            self.orbit_accel,
            self.jitter,
        ];
        if finite_nonneg.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err("agent kinematics must be finite and >= 0".into());
        }
        if !(self.gaze_speed_max > 0.0 && self.gaze_speed_max.is_finite()) {
            return Err("gaze_speed_max must be positive".into());
        }
        if !(self.dwell_min >= 0.0 && self.dwell_max >= self.dwell_min && self.dwell_max.is_finite()) {
            return Err("dwell range is invalid".into());
        }
        if self.candidates == 0 {
            return Err("candidates must be >= 1".into());
        }
        if !(self.toggle_mean_on > 0.0 && self.toggle_mean_off > 0.0) {
            return Err("toggle spell means must be positive".into());
        }
        Ok(())
    }
}

/// What a policy may see of team attention. Empty unless the condition
/// shows attention and the reader's toggle is on.
pub struct ClassificationView<'a> {
    data: Option<ViewData<'a>>,
}

struct ViewData<'a> {
    local: &'a AttentionMap,
    partner: Option<&'a AttentionMap>,
    threshold: f64,
    t: f64,
}

impl<'a> ClassificationView<'a> {
    pub fn empty() -> Self {
        Self { data: None }
    }

    pub fn new(local: &'a AttentionMap, partner: Option<&'a AttentionMap>, threshold: f64, t: f64) -> Self {
        Self {
            data: Some(ViewData {
                local,
                partner,
                threshold,
                t,
            }),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_none()
    }

    pub fn class_linear(&self, li: usize) -> Option<VoxelClass> {
        let d = self.data.as_ref()?;
        let read = |m: &AttentionMap| m.effective_linear(li, d.t).expect("views are read at the current time");
        let local = read(d.local);
        let partner = d.partner.map_or(0.0, read);
        Some(classify_explored(local, partner, d.threshold))
    }
}

/// Two-state explicit trigger with exponential spell lengths.
#[derive(Debug, Clone)]
pub struct ToggleProcess {
    pub on: bool,
    p_off: f64,
    p_on: f64,
    rng: ChaCha8Rng,
}

impl ToggleProcess {
    pub fn new(params: &AgentParams, dt: f64, rng: ChaCha8Rng) -> Self {
        Self {
            on: true,
            p_off: (dt / params.toggle_mean_on).min(1.0),
            p_on: (dt / params.toggle_mean_off).min(1.0),
            rng,
        }
    }

    /// Advances one tick; returns the new state when it flips.
    pub fn step(&mut self) -> Option<bool> {
        let p = if self.on { self.p_off } else { self.p_on };
        if self.rng.random_bool(p) {
            self.on = !self.on;
            Some(self.on)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Fixation {
    point: Point3,
    dwell_until_us: Option<u64>,
}

pub struct TickOutput {
    pub ray: Ray,
    /// Set when the policy consulted the team view this tick.
    pub consulted: Option<bool>,
}

pub struct Agent {
    policy: AgentPolicy,
    params: AgentParams,
    rng: ChaCha8Rng,
    center: Point3,
    eye_z: f64,
    theta: f64,
    omega: f64,
    gaze: Vec3,
    fixation: Option<Fixation>,
    memory: VecDeque<VoxelIndex>,
    waypoint: usize,
}

impl Agent {
    pub fn new(user: UserId, policy: AgentPolicy, params: AgentParams, bounds: &Aabb, mut rng: ChaCha8Rng) -> Self {
        let center = bounds.center();
        let theta = user as f64 * std::f64::consts::PI + rng.random_range(-0.3..=0.3);
        let eye_z = bounds.max.z + params.eye_height;
        let mut a = Self {
            policy,
            params,
            rng,
            center,
            eye_z,
            theta,
            omega: 0.0,
            gaze: Vec3::X,
            fixation: None,
            memory: VecDeque::new(),
            waypoint: 0,
        };
        a.gaze = (center - a.eye()).try_normalize().unwrap_or(Vec3::X);
        a
    }

    pub fn eye(&self) -> Point3 {
        let r = self.params.orbit_radius;
        Point3::new(
            self.center.x + r * self.theta.cos(),
            self.center.y + r * self.theta.sin(),
            self.eye_z,
        )
    }

    /// Whether the next tick will ask the policy for a new fixation.
    pub fn needs_decision(&self, t_us: u64) -> bool {
        match self.fixation {
            None => true,
            Some(f) => f.dwell_until_us.is_some_and(|d| t_us >= d),
        }
    }

    /// Advances the agent to `t_us` and returns its head ray. `view` is only
    /// called when a coordinated policy makes a decision.
    pub fn tick<'v>(
        &mut self,
        t_us: u64,
        dt: f64,
        grid: &VoxelGrid,
        view: impl FnOnce() -> ClassificationView<'v>,
    ) -> TickOutput {
        let accel = self.params.orbit_accel * dt;
        if accel > 0.0 {
            self.omega += self.rng.random_range(-accel..=accel);
        }
        let w = self.params.orbit_speed_max;
        self.omega = self.omega.clamp(-w, w);
        self.theta += self.omega * dt;
        let eye = self.eye();

        let mut consulted = None;
        if self.needs_decision(t_us) {
            let (point, read) = self.choose(eye, grid, view);
            consulted = read;
            self.fixation = Some(Fixation {
                point,
                dwell_until_us: None,
            });
        }
        let fix = self.fixation.as_mut().expect("fixation chosen above");
        let mut desired = (fix.point - eye).try_normalize().unwrap_or(self.gaze);
        if fix.dwell_until_us.is_some() && self.params.jitter > 0.0 {
            let j = self.params.jitter;
            let noise = Vec3::new(
                self.rng.random_range(-j..=j),
                self.rng.random_range(-j..=j),
                self.rng.random_range(-j..=j),
            );
            desired = (desired + noise).try_normalize().unwrap_or(desired);
        }
        let (gaze, arrived) = rotate_towards(self.gaze, desired, self.params.gaze_speed_max * dt);
        self.gaze = gaze;
        if arrived && fix.dwell_until_us.is_none() {
            let dwell = if self.params.dwell_max > self.params.dwell_min {
                self.rng.random_range(self.params.dwell_min..=self.params.dwell_max)
            } else {
                self.params.dwell_min
            };
            fix.dwell_until_us = Some(t_us + (dwell * 1e6).round() as u64);
        }
        TickOutput {
            ray: Ray::new(eye, self.gaze).expect("gaze is normalized"),
            consulted,
        }
    }

    fn choose<'v>(
        &mut self,
        eye: Point3,
        grid: &VoxelGrid,
        view: impl FnOnce() -> ClassificationView<'v>,
    ) -> (Point3, Option<bool>) {
        let active = grid.active();
        match &self.policy {
            AgentPolicy::Scripted { waypoints } => {
                let p = waypoints[self.waypoint % waypoints.len()];
                self.waypoint += 1;
                (Point3::from_array(p), None)
            }
            AgentPolicy::RandomScan => {
                if active.is_empty() {
                    return (self.center, None);
                }
                let v = active[self.rng.random_range(0..active.len())];
                (grid.voxel_center(v), None)
            }
            AgentPolicy::Coordinated => {
                let view = view();
                let read = Some(!view.is_empty());
                if active.is_empty() {
                    return (self.center, read);
                }
                let mut best: Option<(usize, VoxelIndex)> = None;
                for _ in 0..self.params.candidates {
                    let cand = active[self.rng.random_range(0..active.len())];
                    let hit = Ray::towards(eye, grid.voxel_center(cand))
                        .ok()
                        .and_then(|r| grid.nearest_active_hit(&r))
                        .unwrap_or(cand);
                    let score = self.unexplored_around(grid, hit, &view);
                    if best.is_none_or(|(s, _)| score > s) {
                        best = Some((score, hit));
                    }
                }
                let (_, hit) = best.expect("at least one candidate");
                self.memory.push_back(hit);
                while self.memory.len() > self.params.memory {
                    self.memory.pop_front();
                }
                (grid.voxel_center(hit), read)
            }
        }
    }

    fn unexplored_around(&self, grid: &VoxelGrid, c: VoxelIndex, view: &ClassificationView<'_>) -> usize {
        let n = self.params.neighbourhood;
        let [nx, ny, nz] = grid.dims();
        let range = |v: u16, len: usize| v.saturating_sub(n)..=(v.saturating_add(n)).min(len as u16 - 1);
        let mut count = 0;
        for i in range(c.i, nx) {
            for j in range(c.j, ny) {
                for k in range(c.k, nz) {
                    let v = VoxelIndex::new(i, j, k);
                    let li = grid.linear(v);
                    if !grid.is_active_linear(li) {
                        continue;
                    }
                    let remembered = self.memory.iter().any(|m| chebyshev(*m, v) <= n);
                    let seen = view.class_linear(li).is_some_and(|c| c != VoxelClass::Unexplored);
                    let unexplored = !remembered && !seen;
                    count += usize::from(unexplored);
                }
            }
        }
        count
    }
}

fn chebyshev(a: VoxelIndex, b: VoxelIndex) -> u16 {
    a.i.abs_diff(b.i).max(a.j.abs_diff(b.j)).max(a.k.abs_diff(b.k))
}

/// Rotates unit `cur` toward unit `target` by at most `max_angle` radians.
fn rotate_towards(cur: Vec3, target: Vec3, max_angle: f64) -> (Vec3, bool) {
    let angle = cur.dot(target).clamp(-1.0, 1.0).acos();
    if angle <= max_angle {
        return (target, true);
    }
    let axis = cur
        .cross(target)
        .try_normalize()
        .or_else(|| cur.cross(Vec3::Z).try_normalize())
        .or_else(|| cur.cross(Vec3::X).try_normalize())
        .expect("some axis is perpendicular");
    let (s, c) = max_angle.sin_cos();
    let rotated = cur * c + axis.cross(cur) * s;
    (rotated.try_normalize().unwrap_or(target), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_is_bounded() {
        let (v, arrived) = rotate_towards(Vec3::X, Vec3::Y, 0.1);
        assert!(!arrived);
        assert!((v.dot(Vec3::X).acos() - 0.1).abs() < 1e-12);
        assert!(v.z.abs() < 1e-15);
        let (v, arrived) = rotate_towards(Vec3::X, -Vec3::X, 0.5);
        assert!(!arrived && (v.length() - 1.0).abs() < 1e-12);
        assert_eq!(rotate_towards(Vec3::X, Vec3::X, 0.1), (Vec3::X, true));
    }

    #[test]
    fn empty_view_reads_nothing() {
        assert_eq!(ClassificationView::empty().class_linear(0), None);
    }

    #[test]
    fn toggle_spends_most_time_on() {
        use rand::SeedableRng;
        let mut t = ToggleProcess::new(&AgentParams::default(), 0.1, ChaCha8Rng::seed_from_u64(2));
        let n = 200_000;
        let on = (0..n).filter(|_| {
            t.step();
            t.on
        });
        let frac = on.count() as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.03, "{frac}");
    }
}
