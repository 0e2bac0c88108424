//! Seen-location path: proactive shared-map slices, localization against a
//! slice, the device-side update-detection loop and server-side change
//! detection.

mod device;
mod update;

use std::collections::BTreeSet;

use crate::expansion::{wire_point, RigidTransform};
use crate::geometry::{GeometryError, Point3, Pose, ViewCone};
use crate::ids::{ClientId, FrameId, KeyframeId, PointId};
use crate::map_store::{GlobalMap, KdTree};
use crate::overlap::DEFAULT_H;
use crate::wire::{SharedMapResponseMsg, WireFrame, WirePoint};

pub use device::{count_map_requests, DeviceAction, DeviceConfig, DeviceLoop, SharingService, TraceEvent};
pub use update::{get_update_status, UpdateParams};
pub use crate::wire::{UpdateStatusMsg as UpdateStatus, UpdateSummary, UpdateVerdict};

/// Matched-observation count below which localization fails.
pub const DEFAULT_MATCH_THRESHOLD: usize = 75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharingParams {
    pub h: f64,
    pub t_d: f64,
}

impl Default for SharingParams {
    fn default() -> Self {
        Self { h: DEFAULT_H, t_d: 2.0 * DEFAULT_H }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceFrame {
    pub frame_id: FrameId,
    pub client_id: ClientId,
    pub keyframe_id: KeyframeId,
    pub pose: Pose,
    pub fov: f64,
    /// Only ids that are also part of the slice's point table.
    pub point_ids: Vec<PointId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicePoint {
    pub id: PointId,
    pub position: Point3,
    pub descriptor: [u8; 32],
    pub observation_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedMapSlice {
    pub origin_client: ClientId,
    pub origin_keyframe: KeyframeId,
    pub origin_pose: Pose,
    pub cone: ViewCone,
    pub frames: Vec<SliceFrame>,
    pub points: Vec<SlicePoint>,
}

impl SharedMapSlice {
    pub fn empty(origin_client: ClientId, origin_keyframe: KeyframeId, cone: ViewCone) -> Self {
        Self { origin_client, origin_keyframe, origin_pose: *cone.apex_pose(), cone, frames: vec![], points: vec![] }
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty() && self.points.is_empty()
    }

    pub fn point_ids(&self) -> BTreeSet<PointId> {
        self.points.iter().map(|p| p.id).collect()
    }

    /// The same slice expressed through `t` (poses, points and cone apex).
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        let origin_pose = t.apply_pose(&self.origin_pose);
        let cone = ViewCone::new(origin_pose, self.cone.h(), self.cone.fov()).expect("rigid motion keeps cone valid");
        Self {
            origin_pose,
            cone,
            frames: self.frames.iter().map(|f| SliceFrame { pose: t.apply_pose(&f.pose), ..f.clone() }).collect(),
            points: self.points.iter().map(|p| SlicePoint { position: t.apply(&p.position), ..*p }).collect(),
            ..self.clone()
        }
    }

    pub fn to_msg(&self) -> SharedMapResponseMsg {
        SharedMapResponseMsg {
            origin_client: self.origin_client,
            origin_keyframe: self.origin_keyframe,
            origin_pose: self.origin_pose,
            h: self.cone.h(),
            fov: self.cone.fov(),
            frames: self
                .frames
                .iter()
                .map(|f| WireFrame {
                    frame_id: f.frame_id,
                    client_id: f.client_id,
                    keyframe_id: f.keyframe_id,
                    pose: f.pose,
                    fov: f.fov,
                    point_ids: f.point_ids.clone(),
                })
                .collect(),
            points: self
                .points
                .iter()
                .map(|p| WirePoint {
                    id: p.id,
                    position: [p.position.x as f32, p.position.y as f32, p.position.z as f32],
                    descriptor: p.descriptor,
                    observation_count: p.observation_count.min(u16::MAX as u32) as u16,
                })
                .collect(),
        }
    }

    pub fn from_msg(msg: &SharedMapResponseMsg) -> Result<Self, GeometryError> {
        Ok(Self {
            origin_client: msg.origin_client,
            origin_keyframe: msg.origin_keyframe,
            origin_pose: msg.origin_pose,
            cone: ViewCone::new(msg.origin_pose, msg.h, msg.fov)?,
            frames: msg
                .frames
                .iter()
                .map(|f| SliceFrame {
                    frame_id: f.frame_id,
                    client_id: f.client_id,
                    keyframe_id: f.keyframe_id,
                    pose: f.pose,
                    fov: f.fov,
                    point_ids: f.point_ids.clone(),
                })
                .collect(),
            points: msg
                .points
                .iter()
                .map(|p| SlicePoint {
                    id: p.id,
                    position: wire_point(&p.position),
                    descriptor: p.descriptor,
                    observation_count: u32::from(p.observation_count),
                })
                .collect(),
        })
    }

    fn index(&self) -> KdTree {
        KdTree::build(self.points.iter().enumerate().map(|(i, p)| (i as u64, p.position)).collect())
    }
}

/// Map data around a seen query: every point inside the overshared cone plus
/// all points of the neighbor frames selected with the widened apex angle.
pub fn build_shared_map(
    map: &GlobalMap,
    origin: (ClientId, KeyframeId),
    q: &Pose,
    q_fov: f64,
    alpha: f64,
    params: &SharingParams,
) -> Result<SharedMapSlice, GeometryError> {
    let cone = ViewCone::overshared(*q, params.h, q_fov, alpha)?;
    let in_cone = map.points_in_cone(&cone);
    let neighbors = map.select_neighbors(q, cone.fov(), params.t_d);

    let mut frame_ids: BTreeSet<FrameId> = neighbors.frame_ids.iter().copied().collect();
    for id in &in_cone {
        frame_ids.extend(map.point(*id).expect("indexed point exists").owner_frames.iter().copied());
    }
    let point_ids: BTreeSet<PointId> = in_cone.into_iter().chain(neighbors.point_ids).collect();
    let frames = frame_ids
        .iter()
        .filter_map(|id| map.frame(*id))
        .map(|f| SliceFrame {
            frame_id: f.frame_id,
            client_id: f.client_id,
            keyframe_id: f.keyframe_id,
            pose: f.pose,
            fov: f.fov,
            point_ids: f.point_ids.iter().filter(|p| point_ids.contains(p)).copied().collect(),
        })
        .collect();
    let points = point_ids
        .iter()
        .filter_map(|id| map.point(*id))
        .map(|p| SlicePoint { id: p.id, position: p.position, descriptor: p.descriptor, observation_count: p.observation_count })
        .collect();
    Ok(SharedMapSlice { origin_client: origin.0, origin_keyframe: origin.1, origin_pose: *q, cone, frames, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizationOutcome {
    pub matched_count: usize,
    pub success: bool,
}

/// Count observations with a slice point within `r_match`.
pub fn localize(observations: &[Point3], slice: &SharedMapSlice, r_match: f64, threshold: usize) -> LocalizationOutcome {
    localize_on(observations, &slice.index(), r_match, threshold)
}

fn localize_on(observations: &[Point3], tree: &KdTree, r_match: f64, threshold: usize) -> LocalizationOutcome {
    let matched_count = observations.iter().filter(|o| tree.any_within(o, r_match)).count();
    LocalizationOutcome { matched_count, success: matched_count >= threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_store::{MapConfig, NewFrame, PointRecord};

    const FOV: f64 = 1.381;

    fn populated() -> GlobalMap {
        let mut map = GlobalMap::new(MapConfig::default());
        for f in 0..10u64 {
            let pose = Pose::looking_along(Point3::new(f as f64 * 4.0, 0.0, 1.5), 0.15 * f as f64).unwrap();
            let recs: Vec<PointRecord> = (0..100u64)
                .map(|i| {
                    let a = i as f64 * 0.7;
                    let pos = Point3::new(f as f64 * 4.0 + 5.0 + (i % 12) as f64, a.sin() * 6.0, (i % 5) as f64);
                    PointRecord { id: PointId(f * 60 + i), position: pos, descriptor: [0; 32] }
                })
                .collect();
            let nf = NewFrame { frame_id: FrameId(f), client_id: ClientId(1), keyframe_id: KeyframeId(f as u32), pose, fov: FOV, timestamp: f };
            map.insert_frame(nf, &recs).unwrap();
        }
        map
    }

    fn origin() -> (ClientId, KeyframeId) {
        (ClientId(2), KeyframeId(0))
    }

    #[test]
    fn empty_map_gives_empty_slice() {
        let map = GlobalMap::new(MapConfig::default());
        let s = build_shared_map(&map, origin(), &Pose::identity(), FOV, 1.3, &SharingParams::default()).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn slice_matches_linear_oracle_and_grows_with_alpha() {
        let map = populated();
        let q = Pose::looking_along(Point3::new(-2.0, 1.0, 1.5), 0.3).unwrap();
        let params = SharingParams::default();
        let mut previous = BTreeSet::new();
        for alpha in [1.0, 1.1, 1.3, 1.6, 2.5] {
            let s = build_shared_map(&map, origin(), &q, FOV, alpha, &params).unwrap();
            let cone = ViewCone::overshared(q, params.h, FOV, alpha).unwrap();
            let mut oracle: BTreeSet<PointId> = map.points().filter(|p| cone.contains(&p.position)).map(|p| p.id).collect();
            for f in map.frames() {
                if crate::geometry::pose_distance(&q, &f.pose) < params.t_d
                    && crate::geometry::pose_angle(&q, &f.pose) < 0.5 * (cone.fov() + f.fov)
                {
                    oracle.extend(f.point_ids.iter().copied());
                }
            }
            assert_eq!(s.point_ids(), oracle);
            assert!(previous.is_subset(&oracle));
            previous = oracle;
        }
    }

    #[test]
    fn slice_roundtrips_through_the_wire() {
        let map = populated();
        let s = build_shared_map(&map, origin(), &Pose::looking_along(Point3::origin(), 0.1).unwrap(), FOV, 1.3, &SharingParams::default()).unwrap();
        let back = SharedMapSlice::from_msg(&s.to_msg()).unwrap();
        assert_eq!(back.point_ids(), s.point_ids());
        assert_eq!(back.frames, s.frames);
    }

    #[test]
    fn localization_counts() {
        let map = populated();
        let s = build_shared_map(&map, origin(), &Pose::looking_along(Point3::origin(), 0.1).unwrap(), FOV, 1.3, &SharingParams::default()).unwrap();
        let obs: Vec<Point3> = s.points.iter().map(|p| p.position).collect();
        let out = localize(&obs, &s, 0.5, 75);
        assert_eq!(out.matched_count, obs.len());
        assert_eq!(out.success, obs.len() >= 75);

        let empty = SharedMapSlice::empty(ClientId(0), KeyframeId(0), s.cone);
        assert_eq!(localize(&obs, &empty, 0.5, 75), LocalizationOutcome { matched_count: 0, success: false });

        // One isolated slice point, observations just outside r_match.
        let single = SharedMapSlice { points: vec![s.points[0]], ..s.clone() };
        let c = s.points[0].position;
        let shifted: Vec<Point3> = (0..100)
            .map(|i| {
                let a = i as f64 * 0.1;
                c + nalgebra::Vector3::new(a.cos(), a.sin(), 0.0) * (1.01 * 0.5)
            })
            .collect();
        assert_eq!(localize(&shifted, &single, 0.5, 75).matched_count, 0);
    }
}
