//! Camera model that turns a pose in a scene into a keyframe.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scene::Scene;
use crate::expansion::{Keyframe, KeyframePoint, RigidTransform};
use crate::geometry::{Pose, ViewCone};
use crate::ids::{KeyframeId, PointId};
use crate::map_store::{Descriptor, KdTree};

/// Stable pseudo-descriptor for a landmark (no image data in simulation).
pub fn descriptor_for(id: PointId) -> Descriptor {
    let mut d = [0u8; 32];
    let mut x = id.0.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
    for chunk in d.chunks_mut(8) {
        x ^= x >> 31;
        x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    d
}

/// Camera model with the device's running per-landmark observation counters.
#[derive(Debug, Clone)]
pub struct Observer {
    pub h: f64,
    pub np_max: usize,
    pub noise_sigma: f64,
    counts: HashMap<PointId, u32>,
}

impl Observer {
    pub fn new(h: f64, np_max: usize, noise_sigma: f64) -> Self {
        Self { h, np_max, noise_sigma, counts: HashMap::new() }
    }

    pub fn count(&self, id: PointId) -> u32 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    /// Keyframe seen from `pose` (global frame). The `np_max` in-cone
    /// landmarks closest to the optical axis are kept, each perturbed by
    /// isotropic Gaussian noise; `to_local` maps the result into the device's
    /// own coordinate frame.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        &mut self,
        scene: &Scene,
        index: &KdTree,
        pose: &Pose,
        fov: f64,
        keyframe_id: KeyframeId,
        to_local: &RigidTransform,
        rng: &mut ChaCha8Rng,
    ) -> Keyframe {
        let Ok(cone) = ViewCone::new(*pose, self.h, fov) else {
            return Keyframe { keyframe_id, pose: to_local.apply_pose(pose), fov, points: vec![] };
        };
        let mut visible: Vec<(f64, usize)> = index
            .radius_search(&cone.apex(), cone.slant_height())
            .ids
            .into_iter()
            .map(|i| i as usize)
            .filter(|&i| cone.contains(&scene.landmarks[i].position))
            .map(|i| (cone.off_axis_angle(&scene.landmarks[i].position), i))
            .collect();
        visible.sort_by(|a, b| a.0.total_cmp(&b.0).then(scene.landmarks[a.1].id.cmp(&scene.landmarks[b.1].id)));
        visible.truncate(self.np_max);
        visible.sort_by_key(|&(_, i)| scene.landmarks[i].id);
        let noise = (self.noise_sigma > 0.0).then(|| Normal::new(0.0, self.noise_sigma).expect("finite sigma"));
        let points = visible
            .into_iter()
            .map(|(_, i)| {
                let l = &scene.landmarks[i];
                let c = self.counts.entry(l.id).or_insert(0);
                *c += 1;
                let mut p = l.position;
                if let Some(n) = &noise {
                    for k in 0..3 {
                        p[k] += n.sample(rng);
                    }
                }
                KeyframePoint { landmark_id: l.id, position: to_local.apply(&p), descriptor: descriptor_for(l.id), local_observation_count: *c }
            })
            .collect();
        Keyframe { keyframe_id, pose: to_local.apply_pose(pose), fov, points }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use crate::sim::scene::{generate_scene, Bounds, ClusterLayout};
    use rand::SeedableRng;

    const FOV: f64 = 1.381;

    fn scene() -> Scene {
        generate_scene(1, Bounds { min: [0.0, -15.0, -10.0], max: [60.0, 15.0, 10.0] }, 6000, &ClusterLayout::default()).unwrap()
    }

    #[test]
    fn empty_scene_gives_empty_keyframe() {
        let mut s = scene();
        s.landmarks.clear();
        let idx = s.index();
        let mut o = Observer::new(20.0, 300, 0.05);
        let kf = o.observe(&s, &idx, &Pose::identity(), FOV, KeyframeId(0), &RigidTransform::identity(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(kf.points.is_empty());
    }

    #[test]
    fn noiseless_positions_are_exact_and_capped() {
        let s = scene();
        let idx = s.index();
        let mut o = Observer::new(20.0, 50, 0.0);
        let pose = Pose::looking_along(Point3::new(5.0, 0.0, 0.0), 0.0).unwrap();
        let kf = o.observe(&s, &idx, &pose, FOV, KeyframeId(0), &RigidTransform::identity(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(kf.points.len(), 50);
        let cone = ViewCone::new(pose, 20.0, FOV).unwrap();
        let worst = kf.points.iter().map(|p| cone.off_axis_angle(&p.position)).fold(0.0, f64::max);
        let by_id: HashMap<PointId, Point3> = s.landmarks.iter().map(|l| (l.id, l.position)).collect();
        for p in &kf.points {
            assert_eq!(p.position, by_id[&p.landmark_id]);
        }
        // Nothing closer to the axis was dropped.
        let dropped = s
            .landmarks
            .iter()
            .filter(|l| cone.contains(&l.position) && !kf.points.iter().any(|p| p.landmark_id == l.id))
            .map(|l| cone.off_axis_angle(&l.position))
            .fold(f64::INFINITY, f64::min);
        assert!(dropped >= worst);
    }

    #[test]
    fn revisit_counter() {
        let s = scene();
        let idx = s.index();
        let mut o = Observer::new(20.0, 300, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut kfs = vec![];
        for i in 0..5 {
            let pose = Pose::looking_along(Point3::new(5.0 + i as f64 * 0.5, 0.0, 0.0), 0.0).unwrap();
            kfs.push(o.observe(&s, &idx, &pose, FOV, KeyframeId(i), &RigidTransform::identity(), &mut rng));
        }
        let in_all = kfs[0].points.iter().find(|p| kfs.iter().all(|k| k.points.iter().any(|q| q.landmark_id == p.landmark_id))).unwrap();
        let last = kfs[4].points.iter().find(|q| q.landmark_id == in_all.landmark_id).unwrap();
        assert_eq!(last.local_observation_count, 5);
        assert_eq!(o.count(in_all.landmark_id), 5);
    }
}
