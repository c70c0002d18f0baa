//! Per-user attention maps with lazy exponential decay.
//!
//! Every voxel stores `(raw_value, last_update)`; the effective value at
//! time `t` is `raw_value * 2^(-(t - last_update) / half_life)`. Decay is
//! only materialized for the voxels a capture touches, so a capture tick
//! costs the size of its delta list, not the size of the grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Ray;
use crate::voxel::{VoxelGrid, VoxelIndex};

pub type UserId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("clock regression: read at {requested} before last update {last_update}")]
    ClockRegression { requested: f64, last_update: f64 },
    #[error("invalid capture config: {0}")]
    InvalidConfig(String),
    #[error("voxel {0} outside the map's grid")]
    OutOfGrid(VoxelIndex),
    #[error("field dimensions {found:?} do not match {expected:?}")]
    DimsMismatch { expected: [usize; 3], found: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    /// Attention lands on the nearest active voxel (and its active
    /// neighbourhood when the influence radius is positive).
    DataAware,
    /// Attention lands on every voxel the ray passes through.
    DataAgnostic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    pub mode: CaptureMode,
    /// Meters; 0 restricts each capture to the hit voxel.
    pub influence_radius: f64,
    pub center_increment: f64,
    pub falloff_exponent: f64,
    /// Seconds.
    pub half_life: f64,
    pub capture_rate_hz: f64,
    pub epsilon_floor: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            mode: CaptureMode::DataAware,
            influence_radius: 0.0,
            center_increment: 1.0,
            falloff_exponent: 1.0,
            half_life: 60.0,
            capture_rate_hz: 10.0,
            epsilon_floor: 1e-6,
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<(), AttentionError> {
        let bad = |m: &str| Err(AttentionError::InvalidConfig(m.to_string()));
        if !(self.half_life > 0.0 && self.half_life.is_finite()) {
            return bad("half_life must be positive");
        }
        if !(self.capture_rate_hz > 0.0 && self.capture_rate_hz.is_finite()) {
            return bad("capture_rate_hz must be positive");
        }
        if !(self.influence_radius >= 0.0 && self.influence_radius.is_finite()) {
            return bad("influence_radius must be >= 0");
        }
        if !(self.center_increment > 0.0 && self.center_increment.is_finite()) {
            return bad("center_increment must be positive");
        }
        if !(self.falloff_exponent >= 0.0 && self.falloff_exponent.is_finite()) {
            return bad("falloff_exponent must be >= 0");
        }
        if !(self.epsilon_floor >= 0.0) {
            return bad("epsilon_floor must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub user: UserId,
    /// Seconds since session start.
    pub time: f64,
    pub ray: Ray,
}

/// Dense per-voxel scalar field in i-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dims: [usize; 3],
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            values: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_values(dims: [usize; 3], values: Vec<f64>) -> Result<Self, AttentionError> {
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(AttentionError::DimsMismatch {
                expected: dims,
                found: [values.len(), 1, 1],
            });
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, grid: &VoxelGrid, v: VoxelIndex) -> f64 {
        self.values[grid.linear(v)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Record {
    raw: f64,
    last_update: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    user: UserId,
    dims: [usize; 3],
    half_life: f64,
    epsilon_floor: f64,
    records: Vec<Record>,
    /// Latest capture time accepted.
    clock: f64,
    /// Latest `last_update` over all records.
    latest_update: f64,
}

impl AttentionMap {
    pub fn new(user: UserId, grid: &VoxelGrid, cfg: &CaptureConfig) -> Self {
        Self::with_dims(user, grid.dims(), cfg)
    }

    pub fn with_dims(user: UserId, dims: [usize; 3], cfg: &CaptureConfig) -> Self {
        Self {
            user,
            dims,
            half_life: cfg.half_life,
            epsilon_floor: cfg.epsilon_floor,
            records: vec![Record::default(); dims[0] * dims[1] * dims[2]],
            clock: f64::NEG_INFINITY,
            latest_update: 0.0,
        }
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn half_life(&self) -> f64 {
        self.half_life
    }

    pub fn decay_factor(&self, dt: f64) -> f64 {
        (-dt / self.half_life).exp2()
    }

    pub fn raw_value(&self, grid: &VoxelGrid, v: VoxelIndex) -> f64 {
        self.records[grid.linear(v)].raw
    }

    pub fn last_update(&self, grid: &VoxelGrid, v: VoxelIndex) -> f64 {
        self.records[grid.linear(v)].last_update
    }

    /// Decayed value at `t`, before the epsilon floor is applied.
    pub fn decayed_linear(&self, li: usize, t: f64) -> Result<f64, AttentionError> {
        let r = self.records[li];
        if r.raw == 0.0 {
            return Ok(0.0);
        }
        if t < r.last_update {
            return Err(AttentionError::ClockRegression {
                requested: t,
                last_update: r.last_update,
            });
        }
        Ok(r.raw * self.decay_factor(t - r.last_update))
    }

    pub fn effective_linear(&self, li: usize, t: f64) -> Result<f64, AttentionError> {
        let v = self.decayed_linear(li, t)?;
        Ok(if v < self.epsilon_floor { 0.0 } else { v })
    }

    pub fn effective_value(&self, grid: &VoxelGrid, v: VoxelIndex, t: f64) -> Result<f64, AttentionError> {
        if !grid.in_range(v) {
            return Err(AttentionError::OutOfGrid(v));
        }
        self.effective_linear(grid.linear(v), t)
    }

    /// Adds `delta` to voxel `li` at time `t`, decaying the stored value to
    /// `t` first. Returns the new raw value.
    pub fn add_linear(&mut self, li: usize, delta: f64, t: f64) -> Result<f64, AttentionError> {
        let decayed = self.decayed_linear(li, t)?;
        let r = &mut self.records[li];
        r.raw = decayed + delta;
        r.last_update = t;
        if t > self.latest_update {
            self.latest_update = t;
        }
        Ok(r.raw)
    }

    /// i-major linear index of `v`, or `None` outside the map.
    pub fn linear_of(&self, v: VoxelIndex) -> Option<usize> {
        let [nx, ny, nz] = self.dims;
        ((v.i as usize) < nx && (v.j as usize) < ny && (v.k as usize) < nz)
            .then(|| (v.i as usize * ny + v.j as usize) * nz + v.k as usize)
    }

    pub fn last_update_linear(&self, li: usize) -> f64 {
        self.records[li].last_update
    }

    pub fn latest_update(&self) -> f64 {
        self.latest_update
    }

    /// Effective value of every voxel at `t`.
    pub fn snapshot(&self, t: f64) -> Result<Field, AttentionError> {
        if t < self.latest_update {
            return Err(AttentionError::ClockRegression {
                requested: t,
                last_update: self.latest_update,
            });
        }
        let mut field = Field::zeros(self.dims);
        for (li, out) in field.values.iter_mut().enumerate() {
            *out = self.effective_linear(li, t)?;
        }
        Ok(field)
    }

    /// Number of voxels with a nonzero stored value.
    pub fn touched_count(&self) -> usize {
        self.records.iter().filter(|r| r.raw != 0.0).count()
    }

    /// Applies one gaze sample and returns the deltas it produced.
    pub fn capture(
        &mut self,
        grid: &VoxelGrid,
        sample: &GazeSample,
        cfg: &CaptureConfig,
    ) -> Result<Vec<(VoxelIndex, f64)>, AttentionError> {
        if sample.time < self.clock {
            return Err(AttentionError::ClockRegression {
                requested: sample.time,
                last_update: self.clock,
            });
        }
        if grid.dims() != self.dims {
            return Err(AttentionError::DimsMismatch {
                expected: self.dims,
                found: grid.dims(),
            });
        }
        let deltas = capture_deltas(grid, &sample.ray, cfg);
        for &(v, d) in &deltas {
            self.add_linear(grid.linear(v), d, sample.time)?;
        }
        self.clock = sample.time;
        Ok(deltas)
    }
}

/// Deltas a single gaze ray produces, in i-major voxel order. Pure: does not
/// touch any map.
pub fn capture_deltas(grid: &VoxelGrid, ray: &Ray, cfg: &CaptureConfig) -> Vec<(VoxelIndex, f64)> {
    match cfg.mode {
        CaptureMode::DataAgnostic => {
            let mut out: Vec<_> = grid
                .traversal(ray)
                .map(|v| (v, cfg.center_increment))
                .collect();
            out.sort_by_key(|&(v, _)| v);
            out
        }
        CaptureMode::DataAware => {
            let Some(center) = grid.nearest_active_hit(ray) else {
                return Vec::new();
            };
            if cfg.influence_radius <= 0.0 {
                return vec![(center, cfg.center_increment)];
            }
            let c = grid.voxel_center(center);
            grid.voxels_in_sphere(c, cfg.influence_radius)
                .into_iter()
                .filter(|&v| grid.is_active(v))
                .filter_map(|v| {
                    let d = grid.voxel_center(v).distance(c);
                    let w = if v == center {
                        1.0
                    } else {
                        (1.0 - d / cfg.influence_radius).max(0.0).powf(cfg.falloff_exponent)
                    };
                    let delta = cfg.center_increment * w;
                    (delta > 0.0).then_some((v, delta))
                })
                .collect()
        }
    }
}

/// Free-function form of [`AttentionMap::capture`].
pub fn capture(
    map: &mut AttentionMap,
    grid: &VoxelGrid,
    sample: &GazeSample,
    cfg: &CaptureConfig,
) -> Result<Vec<(VoxelIndex, f64)>, AttentionError> {
    map.capture(grid, sample, cfg)
}
