//! Coordination metrics computed from session traces.
//!
//! Coverage uses "ever explored" semantics: a voxel counts once its value
//! reaches the explored threshold at some capture, even if it later decays.
//! Redundancy is one minus the normalized Shannon entropy of team-wide
//! per-voxel observation counts.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::{AttentionMap, CaptureConfig, UserId};
use crate::session::{Condition, SessionWorld, Trace, TraceEvent};
use crate::text::{fmt_opt_f64, parse_opt_f64};
use crate::voxel::VoxelIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("event for user {0} outside the team")]
    UnknownUser(UserId),
    #[error("discovery of unknown target {0}")]
    UnknownTarget(usize),
    #[error("target {0} discovered twice")]
    Rediscovered(usize),
    #[error("voxel {0} outside the grid")]
    OutOfGrid(VoxelIndex),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Denominator for collaboration gains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum GainBaseline {
    /// Best individual in the same session.
    #[default]
    Best,
    /// Mean over individuals.
    Mean,
}

/// Session facts the trace alone does not carry.
#[derive(Debug, Clone)]
pub struct MetricsContext {
    pub dims: [usize; 3],
    pub active: Vec<bool>,
    pub active_count: usize,
    pub capture: CaptureConfig,
    pub threshold: f64,
    pub target_count: usize,
    pub users: usize,
    pub condition: Condition,
    pub gain_baseline: GainBaseline,
}

impl MetricsContext {
    pub fn from_world(world: &SessionWorld) -> Self {
        let grid = &world.grid;
        let cfg = &world.config;
        Self {
            dims: grid.dims(),
            active: (0..grid.len()).map(|li| grid.is_active_linear(li)).collect(),
            active_count: grid.active_count(),
            capture: cfg.capture,
            threshold: cfg.explored_threshold(),
            target_count: world.targets.len(),
            users: cfg.policies.len(),
            condition: cfg.condition,
            gain_baseline: GainBaseline::Best,
        }
    }

    fn linear(&self, v: VoxelIndex) -> Option<usize> {
        let [nx, ny, nz] = self.dims;
        ((v.i as usize) < nx && (v.j as usize) < ny && (v.k as usize) < nz)
            .then(|| (v.i as usize * ny + v.j as usize) * nz + v.k as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Computed from a truncated trace.
    pub partial: bool,
    pub targets_total: usize,
    pub targets_found: usize,
    pub targets_found_by_user: Vec<usize>,
    pub targets_found_pct: f64,
    pub coverage_pct_by_user: Vec<f64>,
    /// Team coverage.
    pub coverage_pct: f64,
    pub coverage_efficiency: Option<f64>,
    pub target_gain: Option<f64>,
    pub coverage_gain: Option<f64>,
    pub normalized_redundancy: Option<f64>,
    pub total_observations: usize,
    pub unique_observations: usize,
    /// Share of each user's ticks with the attention display on; absent
    /// without the display.
    pub toggle_on_fraction: Vec<Option<f64>>,
}

/// `target_pct / coverage_pct`; absent when nothing was covered.
pub fn coverage_efficiency(target_pct: f64, coverage_pct: f64) -> Option<f64> {
    (coverage_pct > 0.0).then(|| target_pct / coverage_pct)
}

/// `1 - H / ln k` over the nonzero `counts` of k distinct voxels. A single
/// voxel gives 1; equal counts give exactly 0. Absent without observations.
pub fn normalized_redundancy(counts: &[u64]) -> Option<f64> {
    let counts: Vec<u64> = counts.iter().copied().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    if counts.len() == 1 {
        return Some(1.0);
    }
    if counts.iter().all(|&c| c == counts[0]) {
        return Some(0.0);
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Some((1.0 - h / (counts.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Redundancy of a multiset of `(user, voxel)` observations, pooled over
/// users.
pub fn observation_redundancy(observations: &[(UserId, VoxelIndex)]) -> Option<f64> {
    let mut counts: BTreeMap<VoxelIndex, u64> = BTreeMap::new();
    for &(_, v) in observations {
        *counts.entry(v).or_default() += 1;
    }
    normalized_redundancy(&counts.into_values().collect::<Vec<_>>())
}

/// Team value over the chosen baseline of individual values.
pub fn gain(team: f64, individuals: &[f64], baseline: GainBaseline) -> Option<f64> {
    let base = match baseline {
        GainBaseline::Best => individuals.iter().copied().fold(0.0, f64::max),
        GainBaseline::Mean if individuals.is_empty() => 0.0,
        GainBaseline::Mean => individuals.iter().sum::<f64>() / individuals.len() as f64,
    };
    (base > 0.0).then(|| team / base)
}

/// `(total, unique)`: captures that landed on an active voxel, and the
/// number of distinct voxels among them.
pub fn observation_counts(trace: &Trace) -> (usize, usize) {
    let hits: Vec<VoxelIndex> = trace
        .events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Capture { hit: Some(v), .. } => Some(*v),
            _ => None,
        })
        .collect();
    let unique = hits.iter().collect::<std::collections::BTreeSet<_>>().len();
    (hits.len(), unique)
}

pub fn compute_report(trace: &Trace, ctx: &MetricsContext) -> Result<MetricsReport, MetricsError> {
    let users = ctx.users;
    let user_idx = |u: UserId| {
        if (u as usize) < users {
            Ok(u as usize)
        } else {
            Err(MetricsError::UnknownUser(u))
        }
    };
    let mut maps: Vec<AttentionMap> = (0..users as UserId)
        .map(|u| AttentionMap::with_dims(u, ctx.dims, &ctx.capture))
        .collect();
    let cells = ctx.active.len();
    let mut explored_by: Vec<Vec<bool>> = vec![vec![false; cells]; users];
    let mut explored_team = vec![false; cells];
    let mut counts: BTreeMap<VoxelIndex, u64> = BTreeMap::new();
    let mut total_obs = 0usize;
    let mut found_by = vec![0usize; users];
    let mut found = vec![false; ctx.target_count];
    let mut toggled = vec![false; users];
    let mut ticks = vec![0u64; users];
    let mut on_ticks = vec![0u64; users];
    let explored = |v: f64| v > 0.0 && v >= ctx.threshold;

    for e in &trace.events {
        match e {
            TraceEvent::Toggle { user, on, .. } => toggled[user_idx(*user)?] = *on,
            TraceEvent::Gaze { user, .. } => {
                let u = user_idx(*user)?;
                ticks[u] += 1;
                on_ticks[u] += u64::from(toggled[u]);
            }
            TraceEvent::Capture { t_us, user, hit, deltas } => {
                let u = user_idx(*user)?;
                let t = *t_us as f64 / 1e6;
                for &(v, d) in deltas {
                    let li = ctx.linear(v).ok_or(MetricsError::OutOfGrid(v))?;
                    maps[u].add_linear(li, d, t)?;
                    if !ctx.active[li] {
                        continue;
                    }
                    if explored(maps[u].effective_linear(li, t)?) {
                        explored_by[u][li] = true;
                    }
                    let mut team = 0.0;
                    for m in &maps {
                        team += m.effective_linear(li, t)?;
                    }
                    if explored(team) {
                        explored_team[li] = true;
                    }
                }
                if let Some(v) = hit {
                    total_obs += 1;
                    *counts.entry(*v).or_default() += 1;
                }
            }
            TraceEvent::Discover { user, target, .. } => {
                let u = user_idx(*user)?;
                let slot = found.get_mut(*target).ok_or(MetricsError::UnknownTarget(*target))?;
                if *slot {
                    return Err(MetricsError::Rediscovered(*target));
                }
                *slot = true;
                found_by[u] += 1;
            }
            _ => {}
        }
    }

    let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
    let covered = |flags: &[bool]| flags.iter().filter(|&&f| f).count();
    let targets_found = found.iter().filter(|&&f| f).count();
    let targets_found_pct = pct(targets_found, ctx.target_count);
    let coverage_pct_by_user: Vec<f64> = explored_by.iter().map(|f| pct(covered(f), ctx.active_count)).collect();
    let coverage_pct = pct(covered(&explored_team), ctx.active_count);
    let individual_targets: Vec<f64> = found_by.iter().map(|&n| n as f64).collect();
    let counts: Vec<u64> = counts.into_values().collect();

    Ok(MetricsReport {
        partial: trace.partial,
        targets_total: ctx.target_count,
        targets_found,
        targets_found_by_user: found_by,
        targets_found_pct,
        coverage_efficiency: coverage_efficiency(targets_found_pct, coverage_pct),
        target_gain: gain(targets_found as f64, &individual_targets, ctx.gain_baseline),
        coverage_gain: gain(coverage_pct, &coverage_pct_by_user, ctx.gain_baseline),
        coverage_pct_by_user,
        coverage_pct,
        normalized_redundancy: normalized_redundancy(&counts),
        total_observations: total_obs,
        unique_observations: counts.len(),
        toggle_on_fraction: (0..users)
            .map(|u| (ctx.condition == Condition::Caav && ticks[u] > 0).then(|| on_ticks[u] as f64 / ticks[u] as f64))
            .collect(),
    })
}

/// Report fields in export order.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Bool(bool),
    Count(usize),
    Real(Option<f64>),
}

impl FieldValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            FieldValue::Bool(b) => Some(f64::from(u8::from(b))),
            FieldValue::Count(n) => Some(n as f64),
            FieldValue::Real(x) => x,
        }
    }

    fn render(&self) -> String {
        match self {
            FieldValue::Bool(b) => b.to_string(),
            FieldValue::Count(n) => n.to_string(),
            FieldValue::Real(x) => fmt_opt_f64(*x),
        }
    }
}

impl MetricsReport {
    pub fn fields(&self) -> Vec<(String, FieldValue)> {
        let mut out = vec![
            ("partial".to_string(), FieldValue::Bool(self.partial)),
            ("targets_total".into(), FieldValue::Count(self.targets_total)),
            ("targets_found".into(), FieldValue::Count(self.targets_found)),
        ];
        for (u, n) in self.targets_found_by_user.iter().enumerate() {
            out.push((format!("targets_found.user{u}"), FieldValue::Count(*n)));
        }
        out.push(("targets_found_pct".into(), FieldValue::Real(Some(self.targets_found_pct))));
        out.push(("coverage_pct".into(), FieldValue::Real(Some(self.coverage_pct))));
        for (u, c) in self.coverage_pct_by_user.iter().enumerate() {
            out.push((format!("coverage_pct.user{u}"), FieldValue::Real(Some(*c))));
        }
        out.push(("coverage_efficiency".into(), FieldValue::Real(self.coverage_efficiency)));
        out.push(("target_gain".into(), FieldValue::Real(self.target_gain)));
        out.push(("coverage_gain".into(), FieldValue::Real(self.coverage_gain)));
        out.push(("normalized_redundancy".into(), FieldValue::Real(self.normalized_redundancy)));
        out.push(("total_observations".into(), FieldValue::Count(self.total_observations)));
        out.push(("unique_observations".into(), FieldValue::Count(self.unique_observations)));
        for (u, f) in self.toggle_on_fraction.iter().enumerate() {
            out.push((format!("toggle_on_fraction.user{u}"), FieldValue::Real(*f)));
        }
        out
    }

    /// One `key=value` line per field.
    pub fn to_kv(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(k, v)| format!("{k}={}\n", v.render()))
            .collect()
    }

    pub fn csv_header(&self) -> Vec<String> {
        self.fields().into_iter().map(|(k, _)| k).collect()
    }

    pub fn csv_row(&self) -> Vec<String> {
        self.fields().into_iter().map(|(_, v)| v.render()).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self, MetricsError> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| MetricsError::Parse {
                line: n + 1,
                message: "expected key=value".into(),
            })?;
            map.insert(k.to_string(), (n + 1, v.to_string()));
        }
        Self::from_pairs(&map)
    }

    pub fn from_csv_record(header: &[String], row: &[String]) -> Result<Self, MetricsError> {
        let map = header
            .iter()
            .zip(row)
            .enumerate()
            .map(|(i, (k, v))| (k.clone(), (i + 1, v.clone())))
            .collect();
        Self::from_pairs(&map)
    }

    fn from_pairs(map: &BTreeMap<String, (usize, String)>) -> Result<Self, MetricsError> {
        let get = |k: &str| {
            map.get(k).ok_or_else(|| MetricsError::Parse {
                line: 0,
                message: format!("missing field `{k}`"),
            })
        };
        let bad = |line: usize, k: &str| MetricsError::Parse {
            line,
            message: format!("bad value for `{k}`"),
        };
        let count = |k: &str| -> Result<usize, MetricsError> {
            let (l, v) = get(k)?;
            v.parse().map_err(|_| bad(*l, k))
        };
        let real = |k: &str| -> Result<Option<f64>, MetricsError> {
            let (l, v) = get(k)?;
            parse_opt_f64(v).map_err(|_| bad(*l, k))
        };
        let required = |k: &str| real(k)?.ok_or_else(|| bad(get(k).map_or(0, |p| p.0), k));
        let users = (0..)
            .take_while(|u| map.contains_key(&format!("coverage_pct.user{u}")))
            .count();
        let partial = {
            let (l, v) = get("partial")?;
            v.parse().map_err(|_| bad(*l, "partial"))?
        };
        Ok(MetricsReport {
            partial,
            targets_total: count("targets_total")?,
            targets_found: count("targets_found")?,
            targets_found_by_user: (0..users).map(|u| count(&format!("targets_found.user{u}"))).collect::<Result<_, _>>()?,
            targets_found_pct: required("targets_found_pct")?,
            coverage_pct: required("coverage_pct")?,
            coverage_pct_by_user: (0..users).map(|u| required(&format!("coverage_pct.user{u}"))).collect::<Result<_, _>>()?,
            coverage_efficiency: real("coverage_efficiency")?,
            target_gain: real("target_gain")?,
            coverage_gain: real("coverage_gain")?,
            normalized_redundancy: real("normalized_redundancy")?,
            total_observations: count("total_observations")?,
            unique_observations: count("unique_observations")?,
            toggle_on_fraction: (0..users).map(|u| real(&format!("toggle_on_fraction.user{u}"))).collect::<Result<_, _>>()?,
        })
    }
}

/// Per-field `(key, a, b, b - a)` for two reports with the same layout.
pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Vec<(String, Option<f64>, Option<f64>, Option<f64>)> {
    let bf: BTreeMap<String, FieldValue> = b.fields().into_iter().collect();
    a.fields()
        .into_iter()
        .map(|(k, va)| {
            let x = va.as_f64();
            let y = bf.get(&k).and_then(FieldValue::as_f64);
            let d = x.zip(y).map(|(x, y)| y - x);
            (k, x, y, d)
        })
        .collect()
}

/// Renders [`compare_reports`] as an aligned text table.
pub fn format_comparison(rows: &[(String, Option<f64>, Option<f64>, Option<f64>)]) -> String {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>24}  {:>24}  {:>24}\n", "metric", "a", "b", "delta");
    for (k, a, b, d) in rows {
        out.push_str(&format!(
            "{k:<width$}  {:>24}  {:>24}  {:>24}\n",
            fmt_opt_f64(*a),
            fmt_opt_f64(*b),
            fmt_opt_f64(*d)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn efficiency_examples() {
        assert!((coverage_efficiency(78.5, 76.5).unwrap() - 1.026_143_790_849_673).abs() < 1e-12);
        assert_eq!(coverage_efficiency(40.0, 40.0), Some(1.0));
        assert_eq!(coverage_efficiency(10.0, 0.0), None);
        let e = coverage_efficiency(62.4, 67.1).unwrap();
        assert!((e - 0.930).abs() < 0.001);
    }

    #[test]
    fn redundancy_examples() {
        assert_eq!(normalized_redundancy(&[3, 3, 3, 3]), Some(0.0));
        assert_eq!(normalized_redundancy(&[7]), Some(1.0));
        assert_eq!(normalized_redundancy(&[]), None);
        let h = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        let r = normalized_redundancy(&[2, 1, 1]).unwrap();
        assert!((r - (1.0 - h / 3f64.ln())).abs() < 1e-12);
        assert!((r - 0.0536).abs() < 1e-3);
    }

    #[test]
    fn gain_examples() {
        assert_eq!(gain(10.0, &[10.0, 0.0], GainBaseline::Best), Some(1.0));
        assert_eq!(gain(10.0, &[5.0, 5.0], GainBaseline::Best), Some(2.0));
        assert_eq!(gain(10.0, &[0.0, 0.0], GainBaseline::Best), None);
        assert_eq!(gain(9.0, &[6.0, 3.0], GainBaseline::Mean), Some(2.0));
    }
}
