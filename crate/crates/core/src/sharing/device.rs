//! Device-side loop for seen locations: localize on a held slice, request a
//! fresh one when that fails, and after `f` consecutive failures ask the
//! server whether the map is outdated.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{localize_on, SharedMapSlice, UpdateStatus, DEFAULT_MATCH_THRESHOLD};
use crate::expansion::Keyframe;
use crate::geometry::Point3;
use crate::ids::{ClientId, PointId};
use crate::map_store::KdTree;
use crate::wire::{KeyframeUploadMsg, OverlapQueryMsg, UpdateCheckMsg, UpdateVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    /// Consecutive localization failures before an update check.
    pub f: u32,
    pub match_threshold: usize,
    /// Recent keyframes sent along with an update check.
    pub window: usize,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self { f: 2, match_threshold: DEFAULT_MATCH_THRESHOLD, window: 5 }
    }
}

/// Server operations the loop depends on.
pub trait SharingService {
    type Error;
    fn request_shared_map(&mut self, query: &OverlapQueryMsg) -> Result<SharedMapSlice, Self::Error>;
    fn update_check(&mut self, msg: &UpdateCheckMsg) -> Result<UpdateStatus, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeviceAction {
    ContinueOnSharedMap,
    /// Fall back to map expansion for the current keyframe.
    Expand,
    /// Localization failed; wait for the next keyframe.
    LocalizationFailed,
    /// The server reported an outdated map; the update hook should run.
    MapUpdate(Vec<PointId>),
}

/// One device decision, serialized as a line of the event trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Keyframe { kf: u32, points: usize },
    HeldLocalize { kf: u32, matched: usize, success: bool },
    Query { kf: u32, np: u16, listed: usize, redundant: bool, degree: f64, seen: bool },
    SharedMapRequest { kf: u32 },
    SharedMap { kf: u32, frames: usize, points: usize },
    Localize { kf: u32, matched: usize, success: bool, failures: u32 },
    UpdateCheck { kf: u32, keyframes: usize },
    UpdateStatus { kf: u32, updating: bool, stale: usize },
    MapUpdate { kf: u32, stale: usize },
    Upload { kf: u32, original: usize, pruned: usize, injected: usize, buffered: bool },
    Continue { kf: u32 },
    Abort { kf: u32, reason: String },
}

pub fn count_map_requests(trace: &[TraceEvent]) -> usize {
    trace.iter().filter(|e| matches!(e, TraceEvent::SharedMapRequest { .. })).count()
}

pub struct DeviceLoop {
    client_id: ClientId,
    config: DeviceConfig,
    held: Option<(SharedMapSlice, KdTree)>,
    failures: u32,
    window: VecDeque<KeyframeUploadMsg>,
}

impl DeviceLoop {
    pub fn new(client_id: ClientId, config: DeviceConfig) -> Self {
        Self { client_id, config, held: None, failures: 0, window: VecDeque::new() }
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn holds_slice(&self) -> bool {
        self.held.is_some()
    }

    pub fn failures(&self) -> u32 {
        self.failures
    }

    /// Remember a keyframe for a later update check.
    pub fn record_keyframe(&mut self, kf: &Keyframe) {
        self.window.push_back(kf.to_upload(self.client_id));
        while self.window.len() > self.config.window.max(1) {
            self.window.pop_front();
        }
    }

    /// Localize on the held slice, if any. A failure drops the slice.
    pub fn localize_held(&mut self, kf: &Keyframe, r_match: f64, trace: &mut Vec<TraceEvent>) -> Option<bool> {
        let (_, tree) = self.held.as_ref()?;
        let out = localize_on(&observations(kf), tree, r_match, self.config.match_threshold);
        trace.push(TraceEvent::HeldLocalize { kf: kf.keyframe_id.0, matched: out.matched_count, success: out.success });
        if out.success {
            self.failures = 0;
        } else {
            self.held = None;
        }
        Some(out.success)
    }

    /// The overlap query said "not seen": the keyframe goes to expansion.
    pub fn on_not_seen(&mut self) {
        self.failures = 0;
        self.held = None;
    }

    /// One pass of the seen-location procedure for the current keyframe.
    pub fn on_seen<S: SharingService>(
        &mut self,
        kf: &Keyframe,
        query: &OverlapQueryMsg,
        r_match: f64,
        service: &mut S,
        trace: &mut Vec<TraceEvent>,
    ) -> Result<DeviceAction, S::Error> {
        let id = kf.keyframe_id.0;
        trace.push(TraceEvent::SharedMapRequest { kf: id });
        let slice = service.request_shared_map(query)?;
        trace.push(TraceEvent::SharedMap { kf: id, frames: slice.frames.len(), points: slice.points.len() });
        if slice.is_empty() {
            self.on_not_seen();
            return Ok(DeviceAction::Expand);
        }
        // The new slice replaces whatever was held before.
        let tree = slice.index();
        let out = localize_on(&observations(kf), &tree, r_match, self.config.match_threshold);
        self.held = Some((slice, tree));
        if out.success {
            self.failures = 0;
            trace.push(TraceEvent::Localize { kf: id, matched: out.matched_count, success: true, failures: 0 });
            return Ok(DeviceAction::ContinueOnSharedMap);
        }
        self.failures += 1;
        trace.push(TraceEvent::Localize { kf: id, matched: out.matched_count, success: false, failures: self.failures });
        if self.failures < self.config.f {
            return Ok(DeviceAction::LocalizationFailed);
        }
        self.failures = 0;
        self.held = None;
        let msg = UpdateCheckMsg { client_id: self.client_id, keyframes: self.window.iter().cloned().collect() };
        trace.push(TraceEvent::UpdateCheck { kf: id, keyframes: msg.keyframes.len() });
        let status = service.update_check(&msg)?;
        let updating = status.verdict == UpdateVerdict::Updating;
        trace.push(TraceEvent::UpdateStatus { kf: id, updating, stale: status.stale_point_ids.len() });
        if updating {
            trace.push(TraceEvent::MapUpdate { kf: id, stale: status.stale_point_ids.len() });
            Ok(DeviceAction::MapUpdate(status.stale_point_ids))
        } else {
            Ok(DeviceAction::Expand)
        }
    }
}

fn observations(kf: &Keyframe) -> Vec<Point3> {
    kf.points.iter().map(|p| p.position).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::KeyframePoint;
    use crate::geometry::{Pose, ViewCone};
    use crate::ids::{FrameId, KeyframeId};
    use crate::sharing::{SliceFrame, SlicePoint, UpdateSummary};

    struct Scripted {
        slices: Vec<SharedMapSlice>,
        status: UpdateVerdict,
        checks: usize,
    }

    impl SharingService for Scripted {
        type Error = ();
        fn request_shared_map(&mut self, _q: &OverlapQueryMsg) -> Result<SharedMapSlice, ()> {
            Ok(if self.slices.len() > 1 { self.slices.remove(0) } else { self.slices[0].clone() })
        }
        fn update_check(&mut self, msg: &UpdateCheckMsg) -> Result<UpdateStatus, ()> {
            assert!(!msg.keyframes.is_empty() && msg.keyframes.len() <= 5);
            self.checks += 1;
            let stale = if self.status == UpdateVerdict::Updating { vec![PointId(1)] } else { vec![] };
            Ok(UpdateStatus { verdict: self.status, stale_point_ids: stale, summary: UpdateSummary::default() })
        }
    }

    fn cone() -> ViewCone {
        ViewCone::new(Pose::identity(), 20.0, 1.381).unwrap()
    }

    fn slice(n: usize) -> SharedMapSlice {
        let mut s = SharedMapSlice::empty(ClientId(1), KeyframeId(0), cone());
        s.points = (0..n)
            .map(|i| SlicePoint { id: PointId(i as u64), position: Point3::new(i as f64, 0.0, 5.0), descriptor: [0; 32], observation_count: 1 })
            .collect();
        if n > 0 {
            s.frames.push(SliceFrame { frame_id: FrameId(0), client_id: ClientId(9), keyframe_id: KeyframeId(0), pose: Pose::identity(), fov: 1.381, point_ids: vec![] });
        }
        s
    }

    fn kf(id: u32, n: usize) -> Keyframe {
        Keyframe {
            keyframe_id: KeyframeId(id),
            pose: Pose::identity(),
            fov: 1.381,
            points: (0..n)
                .map(|i| KeyframePoint { landmark_id: PointId(i as u64), position: Point3::new(i as f64, 0.0, 5.0), descriptor: [0; 32], local_observation_count: 1 })
                .collect(),
        }
    }

    fn query() -> OverlapQueryMsg {
        OverlapQueryMsg::new(ClientId(1), KeyframeId(0), 300, &Pose::identity())
    }

    #[test]
    fn happy_path_then_held_slice() {
        let mut dl = DeviceLoop::new(ClientId(1), DeviceConfig::default());
        let mut svc = Scripted { slices: vec![slice(200)], status: UpdateVerdict::Expansion, checks: 0 };
        let mut trace = vec![];
        let k = kf(0, 150);
        dl.record_keyframe(&k);
        assert_eq!(dl.on_seen(&k, &query(), 0.4, &mut svc, &mut trace).unwrap(), DeviceAction::ContinueOnSharedMap);
        assert_eq!(count_map_requests(&trace), 1);
        assert_eq!(dl.localize_held(&kf(1, 150), 0.4, &mut trace), Some(true));
        assert_eq!(count_map_requests(&trace), 1);
    }

    #[test]
    fn empty_slice_expands_without_update_check() {
        let mut dl = DeviceLoop::new(ClientId(1), DeviceConfig::default());
        let mut svc = Scripted { slices: vec![slice(0)], status: UpdateVerdict::Updating, checks: 0 };
        let mut trace = vec![];
        let k = kf(0, 150);
        dl.record_keyframe(&k);
        assert_eq!(dl.on_seen(&k, &query(), 0.4, &mut svc, &mut trace).unwrap(), DeviceAction::Expand);
        assert_eq!(svc.checks, 0);
    }

    #[test]
    fn f_failures_trigger_update_check() {
        let mut dl = DeviceLoop::new(ClientId(1), DeviceConfig::default());
        let mut svc = Scripted { slices: vec![slice(200)], status: UpdateVerdict::Updating, checks: 0 };
        let mut trace = vec![];
        // Only 40 observations: below the 75-match threshold.
        for id in 0..2 {
            let k = kf(id, 40);
            dl.record_keyframe(&k);
            if dl.localize_held(&k, 0.4, &mut trace) == Some(true) {
                unreachable!();
            }
            let a = dl.on_seen(&k, &query(), 0.4, &mut svc, &mut trace).unwrap();
            if id == 0 {
                assert_eq!(a, DeviceAction::LocalizationFailed);
                assert_eq!(svc.checks, 0);
            } else {
                assert_eq!(a, DeviceAction::MapUpdate(vec![PointId(1)]));
            }
        }
        assert_eq!(svc.checks, 1);
        assert!(!dl.holds_slice());
    }
}
