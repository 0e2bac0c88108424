//! Overlap assessment: sample the query's view cone and classify each sample
//! as REDUNDANT (a neighbor map point lies within the sample spacing) or FRESH.

use thiserror::Error;

use crate::geometry::{sample_cone, GeometryError, Point3, Pose, ViewCone};
use crate::ids::{ClientId, KeyframeId};
use crate::map_store::{GlobalMap, KdTree, MapFrame};

pub const DEFAULT_H: f64 = 20.0;
pub const DEFAULT_T_SEEN: f64 = 0.9;
/// Sample count used when a query carries no point-count hint.
pub const DEFAULT_K: usize = 300;

/// Optional second test on a sample/map-point pair that is already within r.
/// Arguments are the sample, the map point and the query pose.
pub type ViewGate = fn(&Point3, &Point3, &Pose) -> bool;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OverlapError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("seen threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("freshness ratio of an empty trajectory")]
    EmptyTrajectory,
}

#[derive(Debug, Clone, Copy)]
pub struct OverlapParams {
    pub h: f64,
    /// Neighbor distance gate, normally `2h`.
    pub t_d: f64,
    pub t_seen: f64,
    /// Disabled by default; see [`ViewGate`].
    pub view_gate: Option<ViewGate>,
}

impl Default for OverlapParams {
    fn default() -> Self {
        Self { h: DEFAULT_H, t_d: 2.0 * DEFAULT_H, t_seen: DEFAULT_T_SEEN, view_gate: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapVerdict {
    pub overlap_degree: f64,
    pub seen: bool,
    pub redundant_samples: Vec<Point3>,
    pub fresh_samples: Vec<Point3>,
    pub r: f64,
    pub sample_count: usize,
}

impl OverlapVerdict {
    fn from_classes(redundant: Vec<Point3>, fresh: Vec<Point3>, r: f64, t_seen: f64) -> Self {
        let sample_count = redundant.len() + fresh.len();
        let overlap_degree = redundant.len() as f64 / sample_count as f64;
        Self { overlap_degree, seen: overlap_degree > t_seen, redundant_samples: redundant, fresh_samples: fresh, r, sample_count }
    }
}

/// Assess with default `h` and `T_D` against every stored frame.
pub fn assess_overlap(
    map: &GlobalMap,
    q: &Pose,
    q_fov: f64,
    k: usize,
    t_seen: f64,
    seed: u64,
) -> Result<OverlapVerdict, OverlapError> {
    let params = OverlapParams { t_seen, ..OverlapParams::default() };
    assess_overlap_with(map, q, q_fov, k, seed, &params, |_| true)
}

/// Full form: `frame_filter` restricts which stored frames may count as neighbors.
pub fn assess_overlap_with(
    map: &GlobalMap,
    q: &Pose,
    q_fov: f64,
    k: usize,
    seed: u64,
    params: &OverlapParams,
    frame_filter: impl Fn(&MapFrame) -> bool,
) -> Result<OverlapVerdict, OverlapError> {
    if !(params.t_seen > 0.0 && params.t_seen < 1.0) {
        return Err(OverlapError::BadThreshold(params.t_seen));
    }
    let cone = ViewCone::new(*q, params.h, q_fov)?;
    let (samples, r) = sample_cone(&cone, k, seed)?;
    let neighbors = map.select_neighbors_where(q, q_fov, params.t_d, frame_filter);
    let positions: Vec<Point3> = neighbors
        .point_ids
        .iter()
        .filter_map(|id| map.point(*id))
        .map(|p| p.position)
        .collect();
    let marks = classify_samples(&positions, &samples, r, q, params.view_gate);
    let (mut redundant, mut fresh) = (Vec::new(), Vec::new());
    for (s, is_redundant) in samples.into_iter().zip(marks) {
        if is_redundant {
            redundant.push(s);
        } else {
            fresh.push(s);
        }
    }
    Ok(OverlapVerdict::from_classes(redundant, fresh, r, params.t_seen))
}

/// REDUNDANT flag per sample: some neighbor lies within `r` (inclusive).
///
/// Neighbors usually outnumber samples by orders of magnitude, so the index
/// is built over the samples and probed from each neighbor; distance is
/// symmetric, so the marks are the same as probing the other way round.
pub fn classify_samples(neighbors: &[Point3], samples: &[Point3], r: f64, q: &Pose, gate: Option<ViewGate>) -> Vec<bool> {
    let mut marks = vec![false; samples.len()];
    if neighbors.is_empty() || samples.is_empty() {
        return marks;
    }
    let tree = KdTree::build(samples.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect());
    let mut left = samples.len();
    for n in neighbors {
        for i in tree.radius_search(n, r).ids {
            let i = i as usize;
            if !marks[i] && gate.is_none_or(|g| g(&samples[i], n, q)) {
                marks[i] = true;
                left -= 1;
            }
        }
        if left == 0 {
            break;
        }
    }
    marks
}

/// `1 - mean(overlap degree)` over a trajectory.
pub fn freshness_ratio(verdicts: &[OverlapVerdict]) -> Result<f64, OverlapError> {
    freshness_from_degrees(&verdicts.iter().map(|v| v.overlap_degree).collect::<Vec<_>>())
}

pub fn freshness_from_degrees(degrees: &[f64]) -> Result<f64, OverlapError> {
    if degrees.is_empty() {
        return Err(OverlapError::EmptyTrajectory);
    }
    Ok(1.0 - degrees.iter().sum::<f64>() / degrees.len() as f64)
}

/// Sampling seed the server derives from the query identity.
pub fn query_seed(client: ClientId, kf: KeyframeId) -> u64 {
    (u64::from(client.0) << 32) | u64::from(kf.0)
}
