//! Deterministic synthetic world for driving the protocol end to end:
//! landmark scenes, user trajectories, a camera model, scripted scene
//! changes, scenario execution and metric extraction.

mod metrics;
mod observe;
mod scenario;
mod scene;
mod trajectory;

use thiserror::Error;

pub use metrics::{
    freshness_traffic_report, spearman, upload_reduction, FreshnessReport, FreshnessRow, Metrics, ServerMetrics, UserMetrics,
};
pub use observe::{descriptor_for, Observer};
pub use scenario::{
    run_remote, run_scenario, user_keyframes, Execution, FrameOffset, MutationStep, PathConfig, ProtocolConstants, Role, ScenarioConfig,
    ScenarioOutcome, SceneConfig, TransportKind, UserConfig,
};
pub use scene::{generate_scene, mutate_scene, Bounds, ClusterLayout, ClusterSpec, Landmark, Mutation, Scene, SparseZone};
pub use trajectory::{keyframe_poses, TrajectorySpec, Waypoint, DEFAULT_D_KF, DEFAULT_THETA_KF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown cluster {0}")]
    UnknownCluster(u32),
    #[error("configuration: {0}")]
    Config(String),
    #[error("transport setup: {0}")]
    Transport(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}
