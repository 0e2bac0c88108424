//! Server-side change detection over a device's recent keyframes.

use std::collections::{BTreeMap, BTreeSet};

use crate::expansion::Keyframe;
use crate::geometry::{sample_spacing, Point3, ViewCone};
use crate::ids::PointId;
use crate::map_store::{GlobalMap, KdTree};
use crate::overlap::{DEFAULT_H, DEFAULT_K};
use crate::wire::{UpdateStatusMsg, UpdateSummary, UpdateVerdict};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateParams {
    pub h: f64,
    /// Neighbors examined around each high-confidence point.
    pub k_nn: usize,
    pub stale_min: usize,
    pub cluster_min: usize,
    /// Match radius; `None` derives half the sample spacing for `DEFAULT_K`
    /// samples in the first keyframe's cone.
    pub r_match: Option<f64>,
    /// Points closer than this to the rim of a keyframe's observed region are
    /// ignored, so observation noise at the boundary is not read as change.
    pub boundary_margin: f64,
}

impl Default for UpdateParams {
    fn default() -> Self {
        Self { h: DEFAULT_H, k_nn: 8, stale_min: 10, cluster_min: 5, r_match: None, boundary_margin: 0.5 }
    }
}

/// Compare recent keyframes (global frame) with the stored map and decide
/// whether the environment changed.
///
/// A point is considered only where the keyframe demonstrably looked: inside
/// its cone and no further off-axis than its widest observation. Candidates
/// are points whose observation count reaches the in-view median. A candidate
/// is stale when no observation lies within `r_match` of it and at least half
/// of its in-view neighbors are equally unobserved.
pub fn get_update_status(map: &GlobalMap, kfs: &[Keyframe], params: &UpdateParams) -> UpdateStatusMsg {
    let expansion = |summary| UpdateStatusMsg { verdict: UpdateVerdict::Expansion, stale_point_ids: vec![], summary };
    let Some(first) = kfs.first() else {
        return expansion(UpdateSummary::default());
    };
    let r_match = params.r_match.unwrap_or_else(|| {
        ViewCone::new(first.pose, params.h, first.fov).map_or(1.0, |c| 0.5 * sample_spacing(&c, DEFAULT_K))
    });
    let observations: Vec<(u64, Point3)> =
        kfs.iter().flat_map(|k| k.points.iter()).enumerate().map(|(i, p)| (i as u64, p.position)).collect();
    let obs_tree = KdTree::build(observations);
    let observed = |p: &Point3| obs_tree.any_within(p, r_match);

    let mut in_view: BTreeSet<PointId> = BTreeSet::new();
    let mut candidates: BTreeSet<PointId> = BTreeSet::new();
    for kf in kfs {
        let Ok(cone) = ViewCone::new(kf.pose, params.h, kf.fov) else { continue };
        let widest = kf
            .points
            .iter()
            .map(|p| cone.off_axis_angle(&p.position))
            .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))))
            .unwrap_or(cone.half_angle())
            .min(cone.half_angle());
        let axis = cone.axis();
        let ids: Vec<PointId> = map
            .points_in_cone(&cone)
            .into_iter()
            .filter(|id| {
                let p = map.point(*id).expect("indexed").position;
                let d = p - cone.apex();
                let axial = d.dot(&axis);
                let dist = d.norm();
                axial >= params.boundary_margin
                    && axial <= cone.h() - params.boundary_margin
                    && cone.off_axis_angle(&p) <= widest - (params.boundary_margin / dist).min(widest)
            })
            .collect();
        if ids.is_empty() {
            continue;
        }
        let mut counts: Vec<u32> = ids.iter().map(|id| map.point(*id).expect("indexed").observation_count).collect();
        counts.sort_unstable();
        let median = counts[counts.len() / 2];
        for id in &ids {
            if map.point(*id).expect("indexed").observation_count >= median {
                candidates.insert(*id);
            }
        }
        in_view.extend(ids);
    }

    let unobserved: BTreeSet<PointId> =
        candidates.iter().filter(|id| !observed(&map.point(**id).expect("indexed").position)).copied().collect();
    let mut stale: Vec<PointId> = Vec::new();
    for id in &unobserved {
        let p = map.point(*id).expect("indexed").position;
        let neighbors: Vec<PointId> = map
            .point_index()
            .nearest(&p, params.k_nn + 1)
            .into_iter()
            .map(|(n, _)| PointId(n))
            .filter(|n| n != id && in_view.contains(n))
            .take(params.k_nn)
            .collect();
        if neighbors.is_empty() {
            continue;
        }
        let quiet = neighbors.iter().filter(|n| !observed(&map.point(**n).expect("indexed").position)).count();
        if 2 * quiet >= neighbors.len() {
            stale.push(*id);
        }
    }

    let largest_cluster = largest_cluster(map, &stale, 2.0 * r_match);
    let summary = UpdateSummary {
        candidates: candidates.len() as u32,
        unobserved: unobserved.len() as u32,
        stale: stale.len() as u32,
        largest_cluster: largest_cluster as u32,
    };
    if stale.len() >= params.stale_min && largest_cluster >= params.cluster_min {
        UpdateStatusMsg { verdict: UpdateVerdict::Updating, stale_point_ids: stale, summary }
    } else {
        expansion(summary)
    }
}

/// Size of the largest single-linkage cluster with link distance `link`.
fn largest_cluster(map: &GlobalMap, ids: &[PointId], link: f64) -> usize {
    if ids.is_empty() {
        return 0;
    }
    let positions: Vec<Point3> = ids.iter().map(|id| map.point(*id).expect("indexed").position).collect();
    let tree = KdTree::build(positions.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect());
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (i, p) in positions.iter().enumerate() {
        for j in tree.radius_search(p, link).ids {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j as usize));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..ids.len() {
        *sizes.entry(find(&mut parent, i)).or_default() += 1;
    }
    sizes.into_values().max().unwrap_or(0)
}
