//! Server-side global map: frames indexed by pose, points with observation
//! counts, neighbor-frame selection and KD-tree spatial indices.

mod kdtree;
pub mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::mem::size_of;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use kdtree::{KdTree, RadiusHits};

use crate::geometry::{pose_angle, pose_distance, Point3, Pose, ViewCone};
use crate::ids::{ClientId, FrameId, KeyframeId, PointId};

/// Feature slots reserved per map frame.
pub const FEATURE_SLOTS: usize = 1000;
/// Default cap on map points per frame.
pub const DEFAULT_NP_MAX: usize = 300;
/// First id handed out by the position-merging insert path.
pub const MERGED_ID_BASE: u64 = 1 << 62;

pub type Descriptor = [u8; 32];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("frame carries {count} points, cap is {cap}")]
    FrameTooLarge { count: usize, cap: usize },
    #[error("frame {0} already stored")]
    DuplicateFrame(FrameId),
    #[error("unknown frame {0}")]
    UnknownFrame(FrameId),
    #[error("non-finite point position for {0}")]
    NonFinitePoint(PointId),
    #[error("radius must be non-negative, got {0}")]
    NegativeRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub np_max: usize,
    pub n_f: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { np_max: DEFAULT_NP_MAX, n_f: FEATURE_SLOTS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapPoint {
    pub id: PointId,
    pub position: Point3,
    pub descriptor: Descriptor,
    pub observation_count: u32,
    pub owner_frames: BTreeSet<FrameId>,
}

/// One 2-D feature slot. Slots are reserved even when unused.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureSlot {
    pub keypoint: [f32; 2],
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFrame {
    pub frame_id: FrameId,
    pub client_id: ClientId,
    pub keyframe_id: KeyframeId,
    pub pose: Pose,
    pub fov: f64,
    pub feature_slots: Vec<FeatureSlot>,
    pub point_ids: Vec<PointId>,
    pub timestamp: u64,
}

/// Header of a frame about to be inserted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewFrame {
    pub frame_id: FrameId,
    pub client_id: ClientId,
    pub keyframe_id: KeyframeId,
    pub pose: Pose,
    pub fov: f64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRecord {
    pub id: PointId,
    pub position: Point3,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSet {
    pub frame_ids: Vec<FrameId>,
    pub point_ids: Vec<PointId>,
}

impl NeighborSet {
    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

/// KD-tree plus a linearly scanned side buffer of recent insertions.
///
/// The buffer is folded into a rebuilt tree once it outgrows 10% of the tree.
#[derive(Debug, Clone, Default)]
pub struct SpatialIndex {
    tree: KdTree,
    pending: Vec<(u64, Point3)>,
}

impl SpatialIndex {
    /// Index over `points`, identified by their position in the slice.
    pub fn build(points: &[Point3]) -> Self {
        Self::from_entries(points.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect())
    }

    pub fn from_entries(entries: Vec<(u64, Point3)>) -> Self {
        Self { tree: KdTree::build(entries), pending: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tree.len() + self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&mut self, id: u64, p: Point3) {
        self.pending.push((id, p));
        if self.pending.len() > (self.tree.len() / 10).max(32) {
            self.rebuild();
        }
    }

    pub fn rebuild(&mut self) {
        let mut all = std::mem::take(&mut self.pending);
        all.extend_from_slice(self.tree.entries());
        self.tree = KdTree::build(all);
    }

    pub fn entries(&self) -> impl Iterator<Item = &(u64, Point3)> {
        self.tree.entries().iter().chain(self.pending.iter())
    }

    pub fn radius_search(&self, center: &Point3, r: f64) -> Result<RadiusHits, MapError> {
        if !(r >= 0.0) {
            return Err(MapError::NegativeRadius(r));
        }
        let mut hits = self.tree.radius_search(center, r);
        let r2 = r * r;
        for (id, p) in &self.pending {
            hits.visited += 1;
            if kdtree::dist2(p, center) <= r2 {
                hits.ids.push(*id);
            }
        }
        Ok(hits)
    }

    pub fn any_within(&self, center: &Point3, r: f64) -> bool {
        let r2 = r * r;
        self.tree.any_within(center, r) || self.pending.iter().any(|(_, p)| kdtree::dist2(p, center) <= r2)
    }

    pub fn nearest(&self, center: &Point3, k: usize) -> Vec<(u64, f64)> {
        let mut out = self.tree.nearest(center, k);
        out.extend(self.pending.iter().map(|(id, p)| (*id, kdtree::dist2(p, center).sqrt())));
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }
}

/// Build a radius-search index over plain points (ids are slice positions).
pub fn build_point_kdtree(points: &[Point3]) -> SpatialIndex {
    SpatialIndex::build(points)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct GlobalMap {
    config: MapConfig,
    frames: BTreeMap<FrameId, MapFrame>,
    points: BTreeMap<PointId, MapPoint>,
    frame_index: SpatialIndex,
    point_index: SpatialIndex,
    next_frame_id: u64,
    next_merged_id: u64,
}

impl GlobalMap {
    pub fn new(config: MapConfig) -> Self {
        Self { config, next_merged_id: MERGED_ID_BASE, ..Self::default() }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    pub fn frames(&self) -> impl Iterator<Item = &MapFrame> {
        self.frames.values()
    }

    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.values()
    }

    pub fn frame(&self, id: FrameId) -> Option<&MapFrame> {
        self.frames.get(&id)
    }

    pub fn point(&self, id: PointId) -> Option<&MapPoint> {
        self.points.get(&id)
    }

    pub fn point_index(&self) -> &SpatialIndex {
        &self.point_index
    }

    /// Next unused frame id; never reuses ids of stored frames.
    pub fn allocate_frame_id(&mut self) -> FrameId {
        let id = FrameId(self.next_frame_id);
        self.next_frame_id += 1;
        id
    }

    /// Store a frame at full reserved capacity and merge its points.
    ///
    /// Points already present (same id) gain an observation and an owner.
    pub fn insert_frame(&mut self, frame: NewFrame, points: &[PointRecord]) -> Result<FrameId, MapError> {
        if self.frames.contains_key(&frame.frame_id) {
            return Err(MapError::DuplicateFrame(frame.frame_id));
        }
        if points.len() > self.config.np_max {
            return Err(MapError::FrameTooLarge { count: points.len(), cap: self.config.np_max });
        }
        if let Some(bad) = points.iter().find(|p| !(p.position.x.is_finite() && p.position.y.is_finite() && p.position.z.is_finite())) {
            return Err(MapError::NonFinitePoint(bad.id));
        }
        let mut feature_slots = Vec::with_capacity(self.config.n_f);
        let mut point_ids = Vec::with_capacity(self.config.np_max);
        let mut seen = BTreeSet::new();
        for rec in points {
            if !seen.insert(rec.id) {
                continue;
            }
            point_ids.push(rec.id);
            feature_slots.push(FeatureSlot { keypoint: [0.0; 2], descriptor: rec.descriptor });
            match self.points.get_mut(&rec.id) {
                Some(existing) => {
                    existing.owner_frames.insert(frame.frame_id);
                    existing.observation_count = existing.owner_frames.len() as u32;
                }
                None => {
                    self.points.insert(
                        rec.id,
                        MapPoint {
                            id: rec.id,
                            position: rec.position,
                            descriptor: rec.descriptor,
                            observation_count: 1,
                            owner_frames: BTreeSet::from([frame.frame_id]),
                        },
                    );
                    self.point_index.insert(rec.id.0, rec.position);
                }
            }
        }
        self.frame_index.insert(frame.frame_id.0, frame.pose.position());
        self.next_frame_id = self.next_frame_id.max(frame.frame_id.0 + 1);
        self.frames.insert(
            frame.frame_id,
            MapFrame {
                frame_id: frame.frame_id,
                client_id: frame.client_id,
                keyframe_id: frame.keyframe_id,
                pose: frame.pose,
                fov: frame.fov,
                feature_slots,
                point_ids,
                timestamp: frame.timestamp,
            },
        );
        Ok(frame.frame_id)
    }

    /// Insert for id-less uploads: a point within `merge_radius` of a stored
    /// point takes over that point's id, otherwise it gets a fresh one.
    pub fn insert_frame_merging(
        &mut self,
        frame: NewFrame,
        points: &[(Point3, Descriptor)],
        merge_radius: f64,
    ) -> Result<(FrameId, Vec<PointId>), MapError> {
        let mut records = Vec::with_capacity(points.len());
        let mut fresh: Vec<(u64, Point3)> = Vec::new();
        for (pos, desc) in points {
            let stored = self
                .point_index
                .nearest(pos, 1)
                .into_iter()
                .find(|(_, d)| *d <= merge_radius)
                .map(|(id, _)| PointId(id));
            let batch = fresh.iter().find(|(_, p)| nalgebra::distance(p, pos) <= merge_radius).map(|(id, _)| PointId(*id));
            let id = match stored.or(batch) {
                Some(id) => id,
                None => {
                    let id = self.next_merged_id;
                    self.next_merged_id += 1;
                    fresh.push((id, *pos));
                    PointId(id)
                }
            };
            records.push(PointRecord { id, position: *pos, descriptor: *desc });
        }
        let ids = records.iter().map(|r| r.id).collect();
        let stored = self.insert_frame(frame, &records)?;
        Ok((stored, ids))
    }

    /// Frames within `t_d` of the query whose axis differs by less than
    /// half the summed apex angles, together with their points.
    pub fn select_neighbors(&self, q: &Pose, q_fov: f64, t_d: f64) -> NeighborSet {
        self.select_neighbors_where(q, q_fov, t_d, |_| true)
    }

    pub fn select_neighbors_where(
        &self,
        q: &Pose,
        q_fov: f64,
        t_d: f64,
        filter: impl Fn(&MapFrame) -> bool,
    ) -> NeighborSet {
        let Ok(hits) = self.frame_index.radius_search(&q.position(), t_d.max(0.0)) else {
            return NeighborSet::default();
        };
        let mut frame_ids: Vec<FrameId> = hits
            .ids
            .into_iter()
            .map(FrameId)
            .filter(|id| {
                let f = &self.frames[id];
                filter(f) && pose_distance(q, &f.pose) < t_d && pose_angle(q, &f.pose) < 0.5 * (q_fov + f.fov)
            })
            .collect();
        frame_ids.sort_unstable();
        let point_ids = self.points_of(&frame_ids);
        NeighborSet { frame_ids, point_ids }
    }

    /// Deduplicated, sorted union of the frames' point lists.
    pub fn points_of(&self, frame_ids: &[FrameId]) -> Vec<PointId> {
        let mut ids: Vec<PointId> =
            frame_ids.iter().filter_map(|id| self.frames.get(id)).flat_map(|f| f.point_ids.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Stored points inside `cone`, sorted by id.
    pub fn points_in_cone(&self, cone: &ViewCone) -> Vec<PointId> {
        let reach = cone.slant_height().min(1e12);
        let mut ids: Vec<PointId> = self
            .point_index
            .radius_search(&cone.apex(), reach)
            .map(|h| h.ids)
            .unwrap_or_default()
            .into_iter()
            .map(PointId)
            .filter(|id| cone.contains(&self.points[id].position))
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Replace a frame's pose (used by global-optimization hooks).
    pub fn set_frame_pose(&mut self, id: FrameId, pose: Pose) -> Result<(), MapError> {
        let frame = self.frames.get_mut(&id).ok_or(MapError::UnknownFrame(id))?;
        frame.pose = pose;
        self.frame_index = SpatialIndex::from_entries(self.frames.values().map(|f| (f.frame_id.0, f.pose.position())).collect());
        Ok(())
    }

    /// Bytes reserved per frame; independent of how many slots are used.
    pub fn frame_footprint_bytes(&self) -> usize {
        size_of::<MapFrame>() + self.config.n_f * size_of::<FeatureSlot>() + self.config.np_max * size_of::<PointId>()
    }

    pub fn memory_estimate_bytes(&self) -> usize {
        let owners: usize = self.points.values().map(|p| p.owner_frames.len()).sum();
        self.frames.len() * self.frame_footprint_bytes()
            + self.points.len() * size_of::<MapPoint>()
            + owners * size_of::<FrameId>()
    }

    pub fn audit(&self) -> AuditReport {
        let mut v = Vec::new();
        for f in self.frames.values() {
            if f.point_ids.len() > self.config.np_max {
                v.push(format!("{} holds {} points over cap {}", f.frame_id, f.point_ids.len(), self.config.np_max));
            }
            if f.point_ids.capacity() < self.config.np_max || f.feature_slots.capacity() < self.config.n_f {
                v.push(format!("{} is not allocated at full capacity", f.frame_id));
            }
            for pid in &f.point_ids {
                match self.points.get(pid) {
                    None => v.push(format!("{} references missing {}", f.frame_id, pid)),
                    Some(p) if !p.owner_frames.contains(&f.frame_id) => {
                        v.push(format!("{} lists {} but is not an owner", f.frame_id, pid))
                    }
                    _ => {}
                }
            }
        }
        for p in self.points.values() {
            if p.observation_count == 0 || p.observation_count as usize != p.owner_frames.len() {
                v.push(format!("{} count {} vs {} owners", p.id, p.observation_count, p.owner_frames.len()));
            }
            for owner in &p.owner_frames {
                if !self.frames.get(owner).is_some_and(|f| f.point_ids.contains(&p.id)) {
                    v.push(format!("{} claims owner {} which does not list it", p.id, owner));
                }
            }
        }
        let indexed: BTreeMap<u64, Point3> = self.frame_index.entries().copied().collect();
        if indexed.len() != self.frame_index.len()
            || indexed.len() != self.frames.len()
            || self.frames.values().any(|f| indexed.get(&f.frame_id.0) != Some(&f.pose.position()))
        {
            v.push("frame pose index does not match stored frames".to_string());
        }
        let indexed: BTreeMap<u64, Point3> = self.point_index.entries().copied().collect();
        if indexed.len() != self.point_index.len()
            || indexed.len() != self.points.len()
            || self.points.values().any(|p| indexed.get(&p.id.0) != Some(&p.position))
        {
            v.push("point index does not match stored points".to_string());
        }
        AuditReport { violations: v }
    }

    /// Test hook: drop one entry from the point index without touching the points.
    #[doc(hidden)]
    pub fn corrupt_point_index(&mut self) {
        let mut entries: Vec<(u64, Point3)> = self.point_index.entries().copied().collect();
        entries.pop();
        entries.push((u64::MAX, Point3::origin()));
        self.point_index = SpatialIndex::from_entries(entries);
    }

    /// SHA-256 over the snapshot encoding.
    pub fn state_digest(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        snapshot::save(self, &mut buf).expect("writing to a Vec cannot fail");
        Sha256::digest(&buf).into()
    }

    pub(crate) fn restore(
        config: MapConfig,
        next_frame_id: u64,
        next_merged_id: u64,
        frames: Vec<MapFrame>,
        points: Vec<MapPoint>,
    ) -> Self {
        let frame_index = SpatialIndex::from_entries(frames.iter().map(|f| (f.frame_id.0, f.pose.position())).collect());
        let point_index = SpatialIndex::from_entries(points.iter().map(|p| (p.id.0, p.position)).collect());
        Self {
            config,
            frames: frames.into_iter().map(|f| (f.frame_id, f)).collect(),
            points: points.into_iter().map(|p| (p.id, p)).collect(),
            frame_index,
            point_index,
            next_frame_id,
            next_merged_id,
        }
    }

    pub(crate) fn id_counters(&self) -> (u64, u64) {
        (self.next_frame_id, self.next_merged_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::f64::consts::PI;

    pub(crate) fn frame(id: u64, pose: Pose) -> NewFrame {
        NewFrame { frame_id: FrameId(id), client_id: ClientId(1), keyframe_id: KeyframeId(id as u32), pose, fov: 1.381, timestamp: id }
    }

    fn rec(id: u64, x: f64) -> PointRecord {
        PointRecord { id: PointId(id), position: Point3::new(x, 0.0, 0.0), descriptor: [id as u8; 32] }
    }

    #[test]
    fn empty_map_has_no_neighbors_and_is_clean() {
        let map = GlobalMap::new(MapConfig::default());
        assert!(map.select_neighbors(&Pose::identity(), 1.381, 40.0).is_empty());
        assert!(map.audit().is_clean());
    }

    #[test]
    fn neighbor_gates() {
        let mut map = GlobalMap::new(MapConfig::default());
        let far = Pose::looking_along(Point3::new(50.0, 0.0, 0.0), 0.0).unwrap();
        map.insert_frame(frame(0, far), &[rec(1, 50.0)]).unwrap();
        let q = Pose::looking_along(Point3::origin(), 0.0).unwrap();
        assert!(map.select_neighbors(&q, 1.381, 40.0).is_empty());

        // Opposite heading at 10 m: angle pi >= (1.381 + 1.381) / 2.
        let behind = Pose::looking_along(Point3::new(10.0, 0.0, 0.0), PI).unwrap();
        map.insert_frame(frame(1, behind), &[rec(2, 10.0)]).unwrap();
        assert!(map.select_neighbors(&q, 1.381, 40.0).is_empty());

        let ahead = Pose::looking_along(Point3::new(10.0, 0.0, 0.0), 0.3).unwrap();
        map.insert_frame(frame(2, ahead), &[rec(2, 10.0), rec(3, 12.0)]).unwrap();
        let n = map.select_neighbors(&q, 1.381, 40.0);
        assert_eq!(n.frame_ids, vec![FrameId(2)]);
        assert_eq!(n.point_ids, vec![PointId(2), PointId(3)]);
    }

    #[test]
    fn insert_semantics() {
        let mut map = GlobalMap::new(MapConfig::default());
        map.insert_frame(frame(0, Pose::identity()), &[rec(1, 1.0), rec(2, 2.0)]).unwrap();
        assert_eq!((map.frame_count(), map.point_count()), (1, 2));
        map.insert_frame(frame(1, Pose::identity()), &[rec(1, 1.0)]).unwrap();
        assert_eq!(map.point(PointId(1)).unwrap().observation_count, 2);

        let before = map.state_digest();
        assert_eq!(map.insert_frame(frame(1, Pose::identity()), &[rec(9, 9.0)]), Err(MapError::DuplicateFrame(FrameId(1))));
        assert_eq!(map.state_digest(), before);

        let too_many: Vec<PointRecord> = (0..301).map(|i| rec(100 + i, i as f64)).collect();
        assert!(matches!(map.insert_frame(frame(5, Pose::identity()), &too_many), Err(MapError::FrameTooLarge { .. })));
        assert!(map.audit().is_clean());
    }

    #[test]
    fn union_oracle_over_shared_ids() {
        let mut map = GlobalMap::new(MapConfig::default());
        let mut oracle: HashSet<u64> = HashSet::new();
        let mut counts: std::collections::HashMap<u64, u32> = Default::default();
        for f in 0..20u64 {
            // Half of each frame's ids repeat the previous frame's second half.
            let ids: Vec<u64> = (0..200).map(|i| f * 100 + i).collect();
            let recs: Vec<PointRecord> = ids.iter().map(|&i| rec(i, i as f64 * 0.01)).collect();
            map.insert_frame(frame(f, Pose::identity()), &recs).unwrap();
            for i in ids {
                oracle.insert(i);
                *counts.entry(i).or_default() += 1;
            }
        }
        assert_eq!(map.point_count(), oracle.len());
        for p in map.points() {
            assert_eq!(p.observation_count, counts[&p.id.0]);
        }
        assert!(map.audit().is_clean());
    }

    #[test]
    fn footprint_constant_across_frames() {
        let mut map = GlobalMap::new(MapConfig::default());
        let a = map.frame_footprint_bytes();
        map.insert_frame(frame(0, Pose::identity()), &[rec(1, 1.0)]).unwrap();
        map.insert_frame(frame(1, Pose::identity()), &(0..300).map(|i| rec(10 + i, 0.0)).collect::<Vec<_>>()).unwrap();
        assert_eq!(a, map.frame_footprint_bytes());
        for f in map.frames() {
            assert!(f.point_ids.capacity() >= 300 && f.feature_slots.capacity() >= FEATURE_SLOTS);
        }
    }

    #[test]
    fn corrupted_index_is_reported() {
        let mut map = GlobalMap::new(MapConfig::default());
        map.insert_frame(frame(0, Pose::identity()), &[rec(1, 1.0), rec(2, 2.0)]).unwrap();
        map.corrupt_point_index();
        assert!(!map.audit().is_clean());
    }

    #[test]
    fn merging_insert_coalesces_nearby_points() {
        let mut map = GlobalMap::new(MapConfig::default());
        let d = [0u8; 32];
        let (_, first) = map.insert_frame_merging(frame(0, Pose::identity()), &[(Point3::new(0.0, 0.0, 0.0), d), (Point3::new(5.0, 0.0, 0.0), d)], 0.5).unwrap();
        let (_, second) = map.insert_frame_merging(frame(1, Pose::identity()), &[(Point3::new(0.2, 0.0, 0.0), d), (Point3::new(9.0, 0.0, 0.0), d)], 0.5).unwrap();
        assert_eq!(first[0], second[0]);
        assert_ne!(second[1], first[1]);
        assert_eq!(map.point(first[0]).unwrap().observation_count, 2);
        assert!(map.audit().is_clean());
    }

    #[test]
    fn negative_radius_rejected() {
        let idx = build_point_kdtree(&[Point3::origin()]);
        assert_eq!(idx.radius_search(&Point3::origin(), -1.0), Err(MapError::NegativeRadius(-1.0)));
        assert_eq!(idx.radius_search(&Point3::origin(), 0.0).unwrap().ids, vec![0]);
    }
}
