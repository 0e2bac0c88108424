//! Scenario configuration (TOML) and execution against the runtime.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;

use nalgebra::{Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{Metrics, ServerMetrics, UserMetrics};
use super::observe::Observer;
use super::scene::{generate_scene, mutate_scene, Bounds, ClusterLayout, ClusterSpec, Mutation, Scene, SparseZone};
use super::trajectory::{keyframe_poses, TrajectorySpec, Waypoint, DEFAULT_D_KF, DEFAULT_THETA_KF};
use super::SimError;
use crate::expansion::{Keyframe, NoopOptimizer, RigidTransform};
use crate::geometry::{compute_fov, CameraIntrinsics};
use crate::ids::{ClientId, KeyframeId};
use crate::map_store::{GlobalMap, MapConfig, DEFAULT_NP_MAX, FEATURE_SLOTS};
use crate::overlap::{OverlapParams, DEFAULT_H, DEFAULT_T_SEEN};
use crate::runtime::{
    run_client, spawn_local, ClientConfig, ClientReport, InProcessTransport, LatencySummary, Mode, Server, ServerConfig,
    TcpTransport, ThrottledTransport, TokenBucket, Transport,
};
use crate::sharing::{DeviceConfig, SharingParams, UpdateParams, DEFAULT_MATCH_THRESHOLD};
use crate::wire::MessageType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Sequential,
    Concurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Mapper,
    Follower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConstants {
    pub h: f64,
    pub t_d: f64,
    pub t_seen: f64,
    pub f: u32,
    pub match_threshold: usize,
    pub np_max: usize,
    pub alpha: f64,
    pub noise_sigma: f64,
    pub d_kf: f64,
    pub theta_kf: f64,
    /// Keyframes sent with an update check.
    pub update_window: usize,
}

impl Default for ProtocolConstants {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            t_d: 2.0 * DEFAULT_H,
            t_seen: DEFAULT_T_SEEN,
            f: 2,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            np_max: DEFAULT_NP_MAX,
            alpha: 1.3,
            noise_sigma: 0.05,
            d_kf: DEFAULT_D_KF,
            theta_kf: DEFAULT_THETA_KF,
            update_window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub bounds: Bounds,
    pub landmarks: usize,
    #[serde(default)]
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub sparse_zones: Vec<SparseZone>,
    /// Scene seed; defaults to the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathConfig {
    /// `[x, y, z, heading]` rows.
    Waypoints { points: Vec<[f64; 4]> },
    Line { from: [f64; 3], to: [f64; 3] },
    Circle {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        start_angle: f64,
        #[serde(default = "one")]
        loops: f64,
        #[serde(default = "segments")]
        segments: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn segments() -> usize {
    90
}

fn once() -> u32 {
    1
}

/// Rigid offset of a user's local coordinate frame within the world.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameOffset {
    pub translation: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

impl FrameOffset {
    /// Local-to-world transform.
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(Rotation3::from_euler_angles(0.0, 0.0, self.yaw), Vector3::from(self.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub id: u32,
    /// Camera preset name.
    pub camera: String,
    #[serde(default)]
    pub role: Role,
    /// Per-user oversharing factor.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub frame_offset: Option<FrameOffset>,
    pub path: PathConfig,
    /// Traverse the path this many times back to back.
    #[serde(default = "once")]
    pub repeat: u32,
    /// Overrides the scenario mode for this user only.
    #[serde(default)]
    pub mode: Option<Mode>,
}

impl UserConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SimError> {
        CameraIntrinsics::preset(&self.camera).ok_or_else(|| {
            SimError::Config(format!("unknown camera preset {:?}; known: {}", self.camera, CameraIntrinsics::PRESETS.join(", ")))
        })
    }

    pub fn trajectory(&self, k: &ProtocolConstants) -> TrajectorySpec {
        let mut spec = match &self.path {
            PathConfig::Waypoints { points } => TrajectorySpec::new(
                points.iter().map(|p| Waypoint { position: [p[0], p[1], p[2]], heading: p[3] }).collect(),
            ),
            PathConfig::Line { from, to } => TrajectorySpec::line(*from, *to),
            PathConfig::Circle { center, radius, start_angle, loops, segments } => {
                TrajectorySpec::circle(*center, *radius, *start_angle, *loops, *segments)
            }
        };
        spec.d_kf = k.d_kf;
        spec.theta_kf = k.theta_kf;
        spec
    }
}

/// Scene change applied right before the named user starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MutationStep {
    pub before_user: u32,
    #[serde(default)]
    pub remove_cluster: Option<u32>,
    #[serde(default)]
    pub restore_cluster: Option<u32>,
    #[serde(default)]
    pub add_cluster: Option<ClusterSpec>,
}

impl MutationStep {
    pub fn op(&self) -> Result<Mutation, SimError> {
        match (self.remove_cluster, self.restore_cluster, self.add_cluster) {
            (Some(l), None, None) => Ok(Mutation::RemoveCluster(l)),
            (None, Some(l), None) => Ok(Mutation::RestoreCluster(l)),
            (None, None, Some(c)) => Ok(Mutation::AddCluster(c)),
            _ => Err(SimError::Config("a mutation step names exactly one operation".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(default = "mapxx")]
    pub mode: Mode,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub execution: Execution,
    /// Shared cap in bytes per second over every user's link.
    #[serde(default)]
    pub bandwidth_cap: Option<f64>,
    #[serde(default)]
    pub protocol: ProtocolConstants,
    pub scene: SceneConfig,
    pub users: Vec<UserConfig>,
    #[serde(default)]
    pub mutations: Vec<MutationStep>,
}

fn mapxx() -> Mode {
    Mode::Mapxx
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let k = &self.protocol;
        let positive = [k.h, k.t_d, k.t_seen, k.d_kf, k.theta_kf];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || k.f == 0 || k.np_max == 0 || k.update_window == 0 {
            return Err(SimError::Config("protocol constants must be positive".into()));
        }
        if !(k.t_seen <= 1.0) || !(k.noise_sigma >= 0.0) {
            return Err(SimError::Config("t_seen must lie in (0, 1] and noise_sigma must be non-negative".into()));
        }
        if self.users.is_empty() {
            return Err(SimError::Config("scenario needs at least one user".into()));
        }
        let mut ids = BTreeSet::new();
        for u in &self.users {
            if !ids.insert(u.id) {
                return Err(SimError::Config(format!("duplicate user id {}", u.id)));
            }
            u.intrinsics()?;
            u.trajectory(k).validate()?;
            if u.repeat == 0 {
                return Err(SimError::Config(format!("user {}: repeat must be >= 1", u.id)));
            }
            if u.alpha.unwrap_or(k.alpha) < 1.0 {
                return Err(SimError::Config(format!("user {}: alpha must be >= 1", u.id)));
            }
        }
        if !(k.alpha >= 1.0) {
            return Err(SimError::Config("alpha must be >= 1".into()));
        }
        if self.bandwidth_cap.is_some_and(|c| !(c > 0.0) || !c.is_finite()) {
            return Err(SimError::Config("bandwidth_cap must be positive".into()));
        }
        for m in &self.mutations {
            m.op()?;
            if !ids.contains(&m.before_user) {
                return Err(SimError::Config(format!("mutation refers to unknown user {}", m.before_user)));
            }
        }
        if self.execution == Execution::Concurrent && !self.mutations.is_empty() {
            return Err(SimError::Config("scene mutations need sequential execution".into()));
        }
        Ok(())
    }

    pub fn server_config(&self) -> ServerConfig {
        let k = &self.protocol;
        ServerConfig {
            overlap: OverlapParams { h: k.h, t_d: k.t_d, t_seen: k.t_seen, view_gate: None },
            sharing: SharingParams { h: k.h, t_d: k.t_d },
            update: UpdateParams { h: k.h, ..UpdateParams::default() },
            alpha: k.alpha,
            map: MapConfig { np_max: k.np_max, n_f: FEATURE_SLOTS },
            min_alignment_pairs: 10,
        }
    }

    pub fn client_config(&self, u: &UserConfig) -> Result<ClientConfig, SimError> {
        let k = &self.protocol;
        let mut c = ClientConfig::new(ClientId(u.id), u.intrinsics()?, u.mode.unwrap_or(self.mode));
        c.t_seen = k.t_seen;
        c.device = DeviceConfig { f: k.f, match_threshold: k.match_threshold, window: k.update_window };
        Ok(c)
    }

    pub fn scene(&self) -> Result<Scene, SimError> {
        let layout = ClusterLayout { clusters: self.scene.clusters.clone(), sparse_zones: self.scene.sparse_zones.clone() };
        generate_scene(self.scene.seed.unwrap_or(self.seed), self.scene.bounds, self.scene.landmarks, &layout)
    }
}

/// Keyframes a user produces walking its path through `scene`, expressed in
/// the user's own coordinate frame.
pub fn user_keyframes(cfg: &ScenarioConfig, user: &UserConfig, scene: &Scene) -> Result<Vec<Keyframe>, SimError> {
    let k = &cfg.protocol;
    let fov = compute_fov(&user.intrinsics()?)?;
    let poses = keyframe_poses(&user.trajectory(k))?;
    let index = scene.index();
    let to_local = user.frame_offset.unwrap_or_default().transform().inverse();
    let mut observer = Observer::new(k.h, k.np_max, k.noise_sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(user.id).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let mut out = Vec::with_capacity(poses.len() * user.repeat as usize);
    for _ in 0..user.repeat {
        for pose in &poses {
            let id = KeyframeId(out.len() as u32);
            out.push(observer.observe(scene, &index, pose, fov, id, &to_local, &mut rng));
        }
    }
    Ok(out)
}

pub struct ScenarioOutcome {
    /// Deterministic counters (no wall-clock values).
    pub metrics: Metrics,
    pub latency: BTreeMap<MessageType, LatencySummary>,
    pub reports: Vec<ClientReport>,
    pub keyframes: BTreeMap<u32, Vec<Keyframe>>,
    pub server: Arc<Server>,
    /// Scene state after all mutations.
    pub scene: Scene,
}

impl ScenarioOutcome {
    pub fn report(&self, user: u32) -> Option<&ClientReport> {
        self.reports.iter().find(|r| r.client_id == ClientId(user))
    }
}

enum Link {
    Inproc(Arc<Server>),
    Tcp(std::net::SocketAddr),
}

impl Link {
    fn open(&self, bucket: &Option<Arc<TokenBucket>>) -> Result<Box<dyn Transport>, SimError> {
        let base: Box<dyn Transport> = match self {
            Link::Inproc(s) => Box::new(InProcessTransport::new(s)),
            Link::Tcp(addr) => Box::new(TcpTransport::connect(addr).map_err(|e| SimError::Transport(e.to_string()))?),
        };
        Ok(match bucket {
            Some(b) => Box::new(ThrottledTransport::new(base, Arc::clone(b))),
            None => base,
        })
    }
}

type SequentialRun = (Vec<ClientReport>, BTreeMap<u32, Vec<Keyframe>>, Scene);

fn run_sequential(cfg: &ScenarioConfig, link: &Link, bucket: &Option<Arc<TokenBucket>>, mut scene: Scene) -> Result<SequentialRun, SimError> {
    let mut keyframes = BTreeMap::new();
    let mut reports = Vec::with_capacity(cfg.users.len());
    for u in &cfg.users {
        for m in cfg.mutations.iter().filter(|m| m.before_user == u.id) {
            scene = mutate_scene(&scene, m.op()?)?;
        }
        let kfs = user_keyframes(cfg, u, &scene)?;
        let transport = link.open(bucket)?;
        reports.push(run_client(cfg.client_config(u)?, transport, kfs.iter().cloned()));
        keyframes.insert(u.id, kfs);
    }
    Ok((reports, keyframes, scene))
}

/// Walk every user of the scenario, one after another, against an already
/// running server at `addr`. Only device-side metrics are available.
pub fn run_remote(cfg: &ScenarioConfig, addr: std::net::SocketAddr) -> Result<(Vec<ClientReport>, Vec<UserMetrics>), SimError> {
    cfg.validate()?;
    let bucket = cfg.bandwidth_cap.map(TokenBucket::new);
    let (reports, keyframes, _) = run_sequential(cfg, &Link::Tcp(addr), &bucket, cfg.scene()?)?;
    let users = cfg.users.iter().zip(&reports).map(|(u, r)| UserMetrics::from_report(u.role, r, &keyframes[&u.id])).collect();
    Ok((reports, users))
}

/// Run every user of the scenario against a fresh server and collect metrics.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome, SimError> {
    cfg.validate()?;
    let server = Server::with_map(cfg.server_config(), GlobalMap::new(cfg.server_config().map), Box::new(NoopOptimizer));
    for u in &cfg.users {
        if let Some(a) = u.alpha {
            server.set_client_alpha(ClientId(u.id), a);
        }
    }
    let bucket = cfg.bandwidth_cap.map(TokenBucket::new);
    let (link, tcp) = match cfg.transport {
        TransportKind::Inproc => (Link::Inproc(Arc::clone(&server)), None),
        TransportKind::Tcp => {
            let (addr, handle) =
                spawn_local(Arc::clone(&server), Some(cfg.users.len())).map_err(|e| SimError::Transport(e.to_string()))?;
            (Link::Tcp(addr), Some(handle))
        }
    };

    let mut scene = cfg.scene()?;
    let mut keyframes = BTreeMap::new();
    let mut reports = Vec::with_capacity(cfg.users.len());
    match cfg.execution {
        Execution::Sequential => {
            let (r, k, s) = run_sequential(cfg, &link, &bucket, scene)?;
            (reports, keyframes, scene) = (r, k, s);
        }
        Execution::Concurrent => {
            let mut jobs = Vec::new();
            for u in &cfg.users {
                let kfs = user_keyframes(cfg, u, &scene)?;
                jobs.push((cfg.client_config(u)?, link.open(&bucket)?, kfs.clone()));
                keyframes.insert(u.id, kfs);
            }
            let handles: Vec<_> =
                jobs.into_iter().map(|(c, t, kfs)| thread::spawn(move || run_client(c, t, kfs))).collect();
            for h in handles {
                reports.push(h.join().map_err(|_| SimError::Transport("client thread panicked".into()))?);
            }
        }
    }
    drop(link);
    if let Some(h) = tcp {
        h.join()
            .map_err(|_| SimError::Transport("server thread panicked".into()))?
            .map_err(|e| SimError::Transport(e.to_string()))?;
    }

    let users = cfg
        .users
        .iter()
        .zip(&reports)
        .map(|(u, r)| UserMetrics::from_report(u.role, r, &keyframes[&u.id]))
        .collect();
    let metrics = Metrics { name: cfg.name.clone(), mode: cfg.mode, users, server: ServerMetrics::from_server(&server) };
    Ok(ScenarioOutcome { metrics, latency: server.latency_summary(), reports, keyframes, server, scene })
}
