//! Map growth: overlap responses, device-side redundancy removal and
//! injection, server-side integration, and rigid alignment between a user's
//! local frame and the global frame.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Rotation3};
use thiserror::Error;

use crate::geometry::{optical_axis, vector_angle, Point3, Pose, Vector3};
use crate::ids::{ClientId, FrameId, KeyframeId, PointId};
use crate::map_store::{GlobalMap, KdTree, MapError, NewFrame, PointRecord};
use crate::overlap::OverlapVerdict;
use crate::wire::{KeyframeUploadMsg, OverlapResponseMsg, SampleClass, WirePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpansionError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("degenerate correspondences: {0}")]
    Degenerate(&'static str),
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePoint {
    pub landmark_id: PointId,
    pub position: Point3,
    pub descriptor: [u8; 32],
    pub local_observation_count: u32,
}

/// Device-side keyframe in the device's own coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub keyframe_id: KeyframeId,
    pub pose: Pose,
    pub fov: f64,
    pub points: Vec<KeyframePoint>,
}

impl Keyframe {
    pub fn to_upload(&self, client_id: ClientId) -> KeyframeUploadMsg {
        KeyframeUploadMsg {
            client_id,
            keyframe_id: self.keyframe_id,
            pose: self.pose,
            fov: self.fov,
            points: self
                .points
                .iter()
                .map(|p| WirePoint {
                    id: p.landmark_id,
                    position: [p.position.x as f32, p.position.y as f32, p.position.z as f32],
                    descriptor: p.descriptor,
                    observation_count: p.local_observation_count.min(u16::MAX as u32) as u16,
                })
                .collect(),
        }
    }

    pub fn from_upload(msg: &KeyframeUploadMsg) -> Self {
        Self {
            keyframe_id: msg.keyframe_id,
            pose: msg.pose,
            fov: msg.fov,
            points: msg
                .points
                .iter()
                .map(|p| KeyframePoint {
                    landmark_id: p.id,
                    position: wire_point(&p.position),
                    descriptor: p.descriptor,
                    local_observation_count: u32::from(p.observation_count),
                })
                .collect(),
        }
    }
}

pub fn wire_point(p: &[f32; 3]) -> Point3 {
    Point3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

fn to_wire(p: &Point3) -> [f32; 3] {
    [p.x as f32, p.y as f32, p.z as f32]
}

/// Send whichever sample class is smaller; a tie sends the REDUNDANT list.
pub fn build_response(verdict: &OverlapVerdict) -> OverlapResponseMsg {
    let (status, list) = if verdict.fresh_samples.len() < verdict.redundant_samples.len() {
        (SampleClass::Fresh, &verdict.fresh_samples)
    } else {
        (SampleClass::Redundant, &verdict.redundant_samples)
    };
    OverlapResponseMsg { status, r: verdict.r as f32, samples: list.iter().map(to_wire).collect() }
}

/// Drop points already covered by the global map, judged against the
/// response's sample list and spacing.
pub fn partition_keyframe(kf: &Keyframe, resp: &OverlapResponseMsg) -> Keyframe {
    let r = resp.r as f64;
    let tree = KdTree::build(resp.samples.iter().enumerate().map(|(i, s)| (i as u64, wire_point(s))).collect());
    let keep = |p: &KeyframePoint| {
        let near = tree.any_within(&p.position, r);
        match resp.status {
            SampleClass::Redundant => !near,
            SampleClass::Fresh => near,
        }
    };
    Keyframe { points: kf.points.iter().filter(|p| keep(p)).copied().collect(), ..kf.clone() }
}

/// Mean local observation count over a keyframe's points (0 when empty).
pub fn mean_observation_count(kf: &Keyframe) -> f64 {
    if kf.points.is_empty() {
        return 0.0;
    }
    kf.points.iter().map(|p| p.local_observation_count as f64).sum::<f64>() / kf.points.len() as f64
}

/// Re-add removed points observed strictly more often than the original
/// keyframe's mean. Original point order is preserved.
pub fn inject_redundancy(kf_pruned: &Keyframe, kf_orig: &Keyframe) -> Keyframe {
    let mean = mean_observation_count(kf_orig);
    let kept: HashSet<PointId> = kf_pruned.points.iter().map(|p| p.landmark_id).collect();
    let points = kf_orig
        .points
        .iter()
        .filter(|p| kept.contains(&p.landmark_id) || p.local_observation_count as f64 > mean)
        .copied()
        .collect();
    Keyframe { points, ..kf_pruned.clone() }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3) -> Self {
        Self { rotation, translation }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let rot = self.rotation * pose.rotation();
        Pose::from_parts(self.apply(&pose.position()), &rot).expect("rigid image of a finite pose is finite")
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self { rotation: inv, translation: -(inv * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self { rotation: self.rotation * other.rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Rotation3::identity() && self.translation == Vector3::zeros()
    }

    /// Largest deviation of `RᵀR` from `I` and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.rotation.matrix();
        let gram = (m.transpose() * m - Matrix3::identity()).abs().max();
        gram.max((m.determinant() - 1.0).abs())
    }
}

/// Points of an upload mapped into the global frame.
pub fn upload_records(msg: &KeyframeUploadMsg, transform: &RigidTransform) -> Vec<PointRecord> {
    msg.points
        .iter()
        .map(|p| PointRecord { id: p.id, position: transform.apply(&wire_point(&p.position)), descriptor: p.descriptor })
        .collect()
}

/// Map an upload into the global frame and store it as a new map frame.
pub fn integrate_upload(
    map: &mut GlobalMap,
    msg: &KeyframeUploadMsg,
    transform: &RigidTransform,
    timestamp: u64,
) -> Result<FrameId, ExpansionError> {
    if msg.points.len() > map.config().np_max {
        return Err(MapError::FrameTooLarge { count: msg.points.len(), cap: map.config().np_max }.into());
    }
    let frame_id = map.allocate_frame_id();
    let header = NewFrame {
        frame_id,
        client_id: msg.client_id,
        keyframe_id: msg.keyframe_id,
        pose: transform.apply_pose(&msg.pose),
        fov: msg.fov,
        timestamp,
    };
    Ok(map.insert_frame(header, &upload_records(msg, transform))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub transform: RigidTransform,
    pub rms: f64,
}

/// Least-squares rigid transform taking local points onto global points
/// (cross-covariance SVD with reflection correction).
pub fn estimate_alignment(pairs: &[(Point3, Point3)]) -> Result<Alignment, ExpansionError> {
    if pairs.len() < 3 {
        return Err(ExpansionError::Degenerate("fewer than three pairs"));
    }
    let n = pairs.len() as f64;
    let cl = pairs.iter().fold(Vector3::zeros(), |a, (l, _)| a + l.coords) / n;
    let cg = pairs.iter().fold(Vector3::zeros(), |a, (_, g)| a + g.coords) / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (l, g) in pairs {
        let dl = l.coords - cl;
        h += dl * (g.coords - cg).transpose();
        spread += dl * dl.transpose();
    }
    // Collinear (or coincident) local points leave rotation about the line unknown.
    let mut ev: Vec<f64> = spread.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(ExpansionError::Degenerate("collinear correspondences"));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = Rotation3::from_matrix_unchecked(r);
    let translation = cg - rotation * cl;
    let transform = RigidTransform { rotation, translation };
    let sq: f64 = pairs.iter().map(|(l, g)| (transform.apply(l) - g).norm_squared()).sum();
    Ok(Alignment { transform, rms: (sq / n).sqrt() })
}

/// Pluggable global refinement run when a user ends their session.
pub trait GlobalOptimizer: Send + Sync {
    fn optimize(&self, map: &mut GlobalMap, client: ClientId);
}

/// Default hook: leaves the map untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoopOptimizer;

impl GlobalOptimizer for NoopOptimizer {
    fn optimize(&self, _map: &mut GlobalMap, _client: ClientId) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationReport {
    pub client_id: ClientId,
    pub frame_count: usize,
    pub point_count: usize,
    /// Frames whose pose the hook changed.
    pub frames_adjusted: usize,
    /// Largest position shift (m) or axis rotation (rad) among adjusted frames.
    pub max_translation: f64,
    pub max_rotation: f64,
    pub elapsed: Duration,
}

pub fn on_session_end(
    map: &mut GlobalMap,
    client_id: ClientId,
    registered: &BTreeSet<ClientId>,
    optimizer: &dyn GlobalOptimizer,
) -> Result<OptimizationReport, ExpansionError> {
    if !registered.contains(&client_id) {
        return Err(ExpansionError::UnknownClient(client_id));
    }
    let before: BTreeMap<FrameId, Pose> = map.frames().map(|f| (f.frame_id, f.pose)).collect();
    let start = Instant::now();
    optimizer.optimize(map, client_id);
    let elapsed = start.elapsed();
    let (mut adjusted, mut max_t, mut max_r) = (0, 0.0f64, 0.0f64);
    for f in map.frames() {
        if let Some(old) = before.get(&f.frame_id) {
            if *old != f.pose {
                adjusted += 1;
                max_t = max_t.max(nalgebra::distance(&old.position(), &f.pose.position()));
                max_r = max_r.max(vector_angle(&optical_axis(old), &optical_axis(&f.pose)));
            }
        }
    }
    Ok(OptimizationReport {
        client_id,
        frame_count: map.frame_count(),
        point_count: map.point_count(),
        frames_adjusted: adjusted,
        max_translation: max_t,
        max_rotation: max_r,
        elapsed,
    })
}
