//! Deterministic two-agent treasure-hunt sessions.
//!
//! A session generates a visualization mesh, voxelizes it, hides targets in
//! a fraction of the active voxels and lets two kinematic agents search for
//! them. Each agent owns a replica; attention flows between replicas only
//! through batched sync over a seeded network. Everything that happens is
//! recorded in a [`Trace`] that [`replay`] can re-verify event by event.

mod agent;
mod engine;
mod environment;
mod trace;

pub use agent::{AgentParams, AgentPolicy, ClassificationView};
pub use engine::{
    audit_gating, build_world, metrics_from_trace, replay, run_session, world_for_trace, GatingAudit, SessionOutput,
    SessionWorld,
};
pub use environment::{generate_environment, heightfield_mesh, icosphere, EnvironmentSpec};
pub use trace::{sha256_hex, TargetRecord, Trace, TraceError, TraceEvent, TraceHeader, TRACE_SCHEMA_VERSION};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{AttentionError, CaptureConfig, GazeSample, UserId};
use crate::geometry::{Bvh, GeometryError, Point3, TriangleMesh};
use crate::sync::{NetworkModel, SyncError};
use crate::voxel::{VoxelError, VoxelGrid, VoxelIndex, DEFAULT_RESOLUTION};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
/// Sessions model the study's pairs.
pub const TEAM_SIZE: usize = 2;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Voxel(#[from] VoxelError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("replay diverged at event {event}: {message}")]
    Replay { event: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Team attention is visible while the reader's toggle is on.
    Caav,
    /// Control: no attention display.
    NoCaav,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Caav => "caav",
            Condition::NoCaav => "no_caav",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub schema_version: u32,
    pub label: Option<String>,
    /// Master seed; every random stream is derived from it by label.
    pub seed: u64,
    pub environment: EnvironmentSpec,
    /// Cells along the longest axis when `dims` is not given.
    pub resolution: usize,
    pub dims: Option<[usize; 3]>,
    pub condition: Condition,
    pub target_fraction: f64,
    /// Meters between the gaze ray and a target center.
    pub proximity: f64,
    pub facing_cone_deg: f64,
    /// Seconds.
    pub duration: f64,
    pub capture: CaptureConfig,
    /// Defaults to 5% of the capture increment.
    pub explored_threshold: Option<f64>,
    pub sync_interval_ms: u32,
    pub network: NetworkModel,
    pub policies: Vec<AgentPolicy>,
    pub agent: AgentParams,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            label: None,
            seed: 0,
            environment: EnvironmentSpec::scatterplot(),
            resolution: DEFAULT_RESOLUTION,
            dims: None,
            condition: Condition::Caav,
            target_fraction: 0.05,
            proximity: 0.10,
            facing_cone_deg: 30.0,
            duration: 600.0,
            capture: CaptureConfig::default(),
            explored_threshold: None,
            sync_interval_ms: crate::sync::DEFAULT_FLUSH_INTERVAL_MS,
            network: NetworkModel::default(),
            policies: vec![AgentPolicy::Coordinated; TEAM_SIZE],
            agent: AgentParams::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: String| Err(SessionError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return bad(format!("target_fraction {} outside (0, 1]", self.target_fraction));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive".into());
        }
        if !(self.proximity >= 0.0 && self.proximity.is_finite()) {
            return bad("proximity must be >= 0".into());
        }
        if !(self.facing_cone_deg >= 0.0 && self.facing_cone_deg <= 180.0) {
            return bad("facing_cone_deg must be in [0, 180]".into());
        }
        if self.policies.len() != TEAM_SIZE {
            return bad(format!("exactly {TEAM_SIZE} policies required, got {}", self.policies.len()));
        }
        if let Some(t) = self.explored_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return bad("explored_threshold must be >= 0".into());
            }
        }
        if self.dims.is_none() && self.resolution == 0 {
            return bad("resolution must be positive".into());
        }
        self.environment.validate().map_err(SessionError::Config)?;
        self.capture.validate()?;
        crate::sync::check_interval(self.sync_interval_ms)?;
        self.network.validate().map_err(SessionError::Config)?;
        self.agent.validate().map_err(SessionError::Config)?;
        for p in &self.policies {
            p.validate().map_err(SessionError::Config)?;
        }
        Ok(())
    }

    pub fn explored_threshold(&self) -> f64 {
        self.explored_threshold
            .unwrap_or(0.05 * self.capture.center_increment)
    }

    pub fn tick_count(&self) -> u64 {
        (self.duration * self.capture.capture_rate_hz).round() as u64
    }

    /// Time of capture tick `n` in microseconds.
    pub fn tick_time_us(&self, n: u64) -> u64 {
        (n as f64 * 1e6 / self.capture.capture_rate_hz).round() as u64
    }

    /// Short name: the label if set, else environment and condition.
    pub fn display_label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.environment.name(), self.condition.name()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SessionError> {
        serde_json::from_str(s).map_err(|e| SessionError::Config(e.to_string()))
    }
}

/// Optional cross product expanded by [`ExperimentFile::sessions`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Matrix {
    pub environments: Vec<EnvironmentSpec>,
    pub conditions: Vec<Condition>,
    /// Each entry is one team's policy pair.
    pub teams: Vec<Vec<AgentPolicy>>,
}

/// A TOML session file: a [`SessionConfig`] plus an optional `[matrix]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentFile {
    pub base: SessionConfig,
    pub matrix: Option<Matrix>,
}

impl ExperimentFile {
    pub fn parse_toml(text: &str) -> Result<Self, SessionError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| SessionError::Config(e.to_string()))?;
        let matrix = table
            .remove("matrix")
            .map(|m| m.try_into::<Matrix>())
            .transpose()
            .map_err(|e| SessionError::Config(format!("matrix: {e}")))?;
        match table.get("schema_version") {
            Some(v) if v.as_integer() == Some(CONFIG_SCHEMA_VERSION as i64) => {}
            Some(v) => {
                return Err(SessionError::Config(format!(
                    "schema_version {v} is not supported (expected {CONFIG_SCHEMA_VERSION})"
                )))
            }
            None => return Err(SessionError::Config("schema_version is required".into())),
        }
        let base: SessionConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SessionError::Config(e.to_string()))?;
        let file = Self { base, matrix };
        for s in file.sessions() {
            s.validate()?;
        }
        Ok(file)
    }

    /// Expanded sessions in environment-major, then condition, then team
    /// order. Labels are derived when the matrix varies a dimension.
    pub fn sessions(&self) -> Vec<SessionConfig> {
        let Some(m) = &self.matrix else {
            return vec![self.base.clone()];
        };
        let envs = if m.environments.is_empty() { vec![self.base.environment.clone()] } else { m.environments.clone() };
        let conds = if m.conditions.is_empty() { vec![self.base.condition] } else { m.conditions.clone() };
        let teams = if m.teams.is_empty() { vec![self.base.policies.clone()] } else { m.teams.clone() };
        let mut out = Vec::new();
        for env in &envs {
            for &cond in &conds {
                for team in &teams {
                    let mut cfg = self.base.clone();
                    cfg.environment = env.clone();
                    cfg.condition = cond;
                    cfg.policies = team.clone();
                    let mut parts = vec![env.name().to_string(), cond.name().to_string()];
                    if m.teams.len() > 1 {
                        parts.push(team.iter().map(AgentPolicy::name).collect::<Vec<_>>().join("+"));
                    }
                    let prefix = self.base.label.as_deref().map(|l| format!("{l}-")).unwrap_or_default();
                    cfg.label = Some(format!("{prefix}{}", parts.join("-")));
                    out.push(cfg);
                }
            }
        }
        out
    }
}

/// Seeded generator for one named component of a session.
pub fn seed_stream(master: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub voxel: VoxelIndex,
    pub center: Point3,
    pub discovered_by: Option<UserId>,
    /// Seconds.
    pub discovery_time: Option<f64>,
}

/// Chooses ⌊fraction·|active|⌋ distinct active voxels, ordered by index,
/// and snaps each center onto the mesh surface.
pub fn place_targets(
    grid: &VoxelGrid,
    mesh: &TriangleMesh,
    bvh: &Bvh,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Target>, SessionError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SessionError::Config(format!("target_fraction {fraction} outside (0, 1]")));
    }
    let active = grid.active();
    let m = (fraction * active.len() as f64).floor() as usize;
    if m == 0 {
        return Err(SessionError::Config(format!(
            "target_fraction {fraction} of {} active voxels yields no targets",
            active.len()
        )));
    }
    let mut picks: Vec<usize> = index::sample(rng, active.len(), m).into_vec();
    picks.sort_unstable();
    Ok(picks
        .into_iter()
        .map(|p| {
            let voxel = active[p];
            Target {
                voxel,
                center: bvh.closest_point(mesh, grid.voxel_center(voxel)).point,
                discovered_by: None,
                discovery_time: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscoveryParams {
    pub proximity: f64,
    pub facing_cone_deg: f64,
}

impl DiscoveryParams {
    pub fn from_config(cfg: &SessionConfig) -> Self {
        Self {
            proximity: cfg.proximity,
            facing_cone_deg: cfg.facing_cone_deg,
        }
    }

    /// Whether a ray sees `center`: in front of the origin, within the
    /// proximity of the ray and inside the facing cone.
    pub fn sees(&self, sample: &GazeSample, center: Point3) -> bool {
        let to = center - sample.ray.origin;
        let t = to.dot(sample.ray.direction);
        if t <= 0.0 {
            return false;
        }
        let perp = (to - sample.ray.direction * t).length();
        if perp > self.proximity {
            return false;
        }
        let cos = t / to.length();
        cos >= self.facing_cone_deg.to_radians().cos()
    }
}

/// Indices of undiscovered targets the sample reveals, ascending.
pub fn check_discovery(sample: &GazeSample, targets: &[Target], params: &DiscoveryParams) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.discovered_by.is_none() && params.sees(sample, t.center))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Ray, Vec3};

    fn target(c: Point3) -> Target {
        Target {
            voxel: VoxelIndex::new(0, 0, 0),
            center: c,
            discovered_by: None,
            discovery_time: None,
        }
    }

    fn sample(origin: Point3, dir: Vec3) -> GazeSample {
        GazeSample {
            user: 0,
            time: 0.0,
            ray: Ray::new(origin, dir).unwrap(),
        }
    }

    #[test]
    fn discovery_geometry() {
        let p = DiscoveryParams {
            proximity: 0.10,
            facing_cone_deg: 30.0,
        };
        let s = sample(Point3::ZERO, Vec3::X);
        let targets = vec![
            target(Point3::new(1.0, 0.0, 0.0)),
            target(Point3::new(1.0, 0.15, 0.0)),
            target(Point3::new(-1.0, 0.0, 0.0)),
            target(Point3::new(1.0, 0.05, 0.0)),
            // Within 10 cm of the ray but 45 degrees off axis.
            target(Point3::new(0.08, 0.08, 0.0)),
        ];
        assert_eq!(check_discovery(&s, &targets, &p), vec![0, 3]);
        let mut found = targets.clone();
        found[0].discovered_by = Some(1);
        found[0].discovery_time = Some(0.0);
        assert_eq!(check_discovery(&s, &found, &p), vec![3]);
    }

    #[test]
    fn seed_streams_are_independent() {
        use rand::Rng;
        let a: u64 = seed_stream(1, "targets").random();
        let b: u64 = seed_stream(1, "network").random();
        let c: u64 = seed_stream(1, "targets").random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn config_validation() {
        assert!(SessionConfig::default().validate().is_ok());
        let bad = SessionConfig {
            target_fraction: 0.0,
            ..SessionConfig::default()
        };
        assert!(bad.validate().is_err());
        let one = SessionConfig {
            policies: vec![AgentPolicy::RandomScan],
            ..SessionConfig::default()
        };
        assert!(one.validate().is_err());
        let json = SessionConfig::default().to_json();
        assert_eq!(SessionConfig::from_json(&json).unwrap(), SessionConfig::default());
    }

    #[test]
    fn matrix_expansion() {
        let text = r#"
schema_version = 1
seed = 3
duration = 10.0

[matrix]
environments = [{ kind = "scatterplot" }, { kind = "terrain", samples = 17 }]
conditions = ["caav", "no_caav"]
"#;
        let file = ExperimentFile::parse_toml(text).unwrap();
        let sessions = file.sessions();
        let labels: Vec<_> = sessions.iter().map(|s| s.display_label()).collect();
        assert_eq!(
            labels,
            ["scatterplot-caav", "scatterplot-no_caav", "terrain-caav", "terrain-no_caav"]
        );
        assert!(sessions.iter().all(|s| s.seed == 3 && s.duration == 10.0));
        assert!(ExperimentFile::parse_toml("seed = 1").is_err());
        assert!(ExperimentFile::parse_toml("schema_version = 2").is_err());
        assert!(ExperimentFile::parse_toml("schema_version = 1\nbogus = 1").is_err());
    }
}
