//! Team-level views: aggregation of per-user fields, the four-class
//! local/partner coloring, opacity mapping and coverage.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{Field, UserId};
use crate::text::fmt_f64;
use crate::voxel::VoxelGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TeamError {
    #[error("no fields to aggregate")]
    NoUsers,
    #[error("fields cover different grids: {0:?} vs {1:?}")]
    MismatchedGrids([usize; 3], [usize; 3]),
    #[error("grid has no active voxels")]
    EmptyActiveSet,
    #[error("invalid revisualization config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Sum,
    Max,
    /// Spread between the most and least attentive user.
    Difference,
    /// Number of users with nonzero attention.
    Count,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelClass {
    Unexplored,
    /// Explored by the local user only (blue).
    SelfOnly,
    /// Explored by the partner only (orange).
    PartnerOnly,
    /// Explored by both (pink).
    Both,
}

impl VoxelClass {
    pub fn name(self) -> &'static str {
        match self {
            VoxelClass::Unexplored => "unexplored",
            VoxelClass::SelfOnly => "self_only",
            VoxelClass::PartnerOnly => "partner_only",
            VoxelClass::Both => "both",
        }
    }

    pub fn color(self) -> Option<Rgb> {
        match self {
            VoxelClass::Unexplored => None,
            VoxelClass::SelfOnly => Some(Rgb::BLUE),
            VoxelClass::PartnerOnly => Some(Rgb::ORANGE),
            VoxelClass::Both => Some(Rgb::PINK),
        }
    }

    /// The same voxel seen from the partner's side.
    pub fn swapped(self) -> VoxelClass {
        match self {
            VoxelClass::SelfOnly => VoxelClass::PartnerOnly,
            VoxelClass::PartnerOnly => VoxelClass::SelfOnly,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rgb(pub f64, pub f64, pub f64);

impl Rgb {
    pub const BLUE: Rgb = Rgb(0.2, 0.4, 1.0);
    pub const ORANGE: Rgb = Rgb(1.0, 0.55, 0.1);
    pub const PINK: Rgb = Rgb(1.0, 0.4, 0.75);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// Four discrete classes.
    #[default]
    Discrete,
    /// Attention-weighted mix of the two user colors.
    Blend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisConfig {
    pub threshold: f64,
    pub v_max: f64,
    pub color_mode: ColorMode,
    pub user_colors: BTreeMap<UserId, Rgb>,
    /// Explicit trigger state per user.
    pub triggered: BTreeMap<UserId, bool>,
}

impl RevisConfig {
    /// Defaults scaled to the capture increment: threshold 5%, saturation
    /// at ten increments.
    pub fn for_increment(center_increment: f64) -> Self {
        Self {
            threshold: 0.05 * center_increment,
            v_max: 10.0 * center_increment,
            color_mode: ColorMode::Discrete,
            user_colors: BTreeMap::from([(0, Rgb::BLUE), (1, Rgb::ORANGE)]),
            triggered: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TeamError> {
        if !(self.threshold >= 0.0) {
            return Err(TeamError::InvalidConfig("threshold must be >= 0".into()));
        }
        if !(self.v_max > self.threshold) {
            return Err(TeamError::InvalidConfig("v_max must exceed threshold".into()));
        }
        Ok(())
    }

    pub fn is_triggered(&self, user: UserId) -> bool {
        self.triggered.get(&user).copied().unwrap_or(false)
    }
}

impl Default for RevisConfig {
    fn default() -> Self {
        Self::for_increment(1.0)
    }
}

fn check_same(fields: &[&Field]) -> Result<[usize; 3], TeamError> {
    let first = fields.first().ok_or(TeamError::NoUsers)?.dims();
    for f in &fields[1..] {
        if f.dims() != first {
            return Err(TeamError::MismatchedGrids(first, f.dims()));
        }
    }
    Ok(first)
}

pub fn aggregate(fields: &[&Field], method: AggregationMethod) -> Result<Field, TeamError> {
    let dims = check_same(fields)?;
    let mut out = Field::zeros(dims);
    for (li, slot) in out.values_mut().iter_mut().enumerate() {
        let vals = fields.iter().map(|f| f.values()[li]);
        *slot = match method {
            AggregationMethod::Sum => vals.sum(),
            AggregationMethod::Max => vals.fold(f64::NEG_INFINITY, f64::max),
            AggregationMethod::Difference => {
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
                hi - lo
            }
            AggregationMethod::Count => vals.filter(|&v| v > 0.0).count() as f64,
        };
    }
    Ok(out)
}

/// Per-voxel class for a local/partner pair. A zero threshold would mark
/// every voxel explored, so zero values never count as explored.
pub fn classify(local: &Field, partner: &Field, cfg: &RevisConfig) -> Result<Vec<VoxelClass>, TeamError> {
    check_same(&[local, partner])?;
    Ok(local
        .values()
        .iter()
        .zip(partner.values())
        .map(|(&l, &p)| classify_explored(l, p, cfg.threshold))
        .collect())
}

pub fn classify_explored(local: f64, partner: f64, threshold: f64) -> VoxelClass {
    let explored = |v: f64| v > 0.0 && v >= threshold;
    match (explored(local), explored(partner)) {
        (true, true) => VoxelClass::Both,
        (true, false) => VoxelClass::SelfOnly,
        (false, true) => VoxelClass::PartnerOnly,
        (false, false) => VoxelClass::Unexplored,
    }
}

/// Linear ramp from `threshold` (transparent) to `v_max` (opaque).
pub fn opacity(v: f64, cfg: &RevisConfig) -> f64 {
    if !(v >= cfg.threshold) {
        return 0.0;
    }
    ((v - cfg.threshold) / (cfg.v_max - cfg.threshold)).clamp(0.0, 1.0)
}

/// Color for one voxel given both users' values.
pub fn voxel_color(local: f64, partner: f64, cfg: &RevisConfig) -> Option<Rgb> {
    let class = classify_explored(local, partner, cfg.threshold);
    match cfg.color_mode {
        ColorMode::Discrete => class.color(),
        ColorMode::Blend => {
            if class == VoxelClass::Unexplored {
                return None;
            }
            let a = cfg.user_colors.get(&0).copied().unwrap_or(Rgb::BLUE);
            let b = cfg.user_colors.get(&1).copied().unwrap_or(Rgb::ORANGE);
            let w = local / (local + partner);
            Some(Rgb(
                a.0 * w + b.0 * (1.0 - w),
                a.1 * w + b.1 * (1.0 - w),
                a.2 * w + b.2 * (1.0 - w),
            ))
        }
    }
}

/// Share of active voxels whose value reaches `threshold`.
pub fn coverage_fraction(field: &Field, grid: &VoxelGrid, threshold: f64) -> Result<f64, TeamError> {
    if grid.active_count() == 0 {
        return Err(TeamError::EmptyActiveSet);
    }
    if field.dims() != grid.dims() {
        return Err(TeamError::MismatchedGrids(grid.dims(), field.dims()));
    }
    let covered = grid
        .active()
        .iter()
        .filter(|&&v| {
            let x = field.values()[grid.linear(v)];
            x > 0.0 && x >= threshold
        })
        .count();
    Ok(covered as f64 / grid.active_count() as f64)
}

/// Columnar text export for external renderers: one row per active voxel
/// with class, team-sum opacity and each user's value.
pub fn export_revis(grid: &VoxelGrid, users: &[(UserId, &Field)], cfg: &RevisConfig) -> Result<String, TeamError> {
    let fields: Vec<&Field> = users.iter().map(|(_, f)| *f).collect();
    let team = aggregate(&fields, AggregationMethod::Sum)?;
    let mut out = String::from("# heed-revis 1\n# i j k class opacity");
    for (u, _) in users {
        let _ = write!(out, " user{u}");
    }
    out.push('\n');
    for &v in grid.active() {
        let li = grid.linear(v);
        let local = fields[0].values()[li];
        let partner = fields.get(1).map_or(0.0, |f| f.values()[li]);
        let class = classify_explored(local, partner, cfg.threshold);
        let _ = write!(
            out,
            "{} {} {} {} {}",
            v.i,
            v.j,
            v.k,
            class.name(),
            fmt_f64(opacity(team.values()[li], cfg))
        );
        for f in &fields {
            let _ = write!(out, " {}", fmt_f64(f.values()[li]));
        }
        out.push('\n');
    }
    Ok(out)
}
