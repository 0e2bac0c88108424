//! Synthetic landmark worlds and scripted changes to them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::Point3;
use crate::ids::PointId;
use crate::map_store::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        Point3::new(
            rng.random_range(self.min[0]..=self.max[0]),
            rng.random_range(self.min[1]..=self.max[1]),
            rng.random_range(self.min[2]..=self.max[2]),
        )
    }
}

/// A compact blob of landmarks (a parked car, a pillar), removable as a unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub label: u32,
    pub center: [f64; 3],
    pub radius: f64,
    pub count: usize,
    /// Background landmarks are kept this far outside the blob, the way
    /// nothing else occupies the space right around a parked car.
    #[serde(default)]
    pub clearance: f64,
}

/// Region where only a fraction `keep` of the background survives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseZone {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub keep: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterLayout {
    #[serde(default)]
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub sparse_zones: Vec<SparseZone>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: PointId,
    pub position: Point3,
    pub cluster: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<Landmark>,
    pub bounds: Bounds,
    pub seed: u64,
    /// Clusters taken out by `mutate_scene`, kept so they can be put back.
    pub removed: BTreeMap<u32, Vec<Landmark>>,
    next_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mutation {
    RemoveCluster(u32),
    /// Put back a previously removed cluster.
    RestoreCluster(u32),
    /// Add a brand-new cluster.
    AddCluster(ClusterSpec),
}

impl Scene {
    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn cluster_ids(&self, label: u32) -> Vec<PointId> {
        self.landmarks.iter().filter(|l| l.cluster == Some(label)).map(|l| l.id).collect()
    }

    pub fn removed_ids(&self, label: u32) -> Vec<PointId> {
        self.removed.get(&label).map(|v| v.iter().map(|l| l.id).collect()).unwrap_or_default()
    }

    pub fn index(&self) -> KdTree {
        KdTree::build(self.landmarks.iter().enumerate().map(|(i, l)| (i as u64, l.position)).collect())
    }

    fn push_cluster(&mut self, spec: &ClusterSpec, rng: &mut ChaCha8Rng) {
        let c = Point3::from(spec.center);
        let mut made = 0;
        // Rejection sampling inside the ball, clipped to the scene box.
        let mut attempts = 0usize;
        while made < spec.count && attempts < spec.count * 1000 {
            attempts += 1;
            let d = nalgebra::Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            if d.norm_squared() > 1.0 {
                continue;
            }
            let p = c + d * spec.radius;
            if !self.bounds.contains(&p) {
                continue;
            }
            self.landmarks.push(Landmark { id: PointId(self.next_id), position: p, cluster: Some(spec.label) });
            self.next_id += 1;
            made += 1;
        }
    }
}

/// Uniform background of `landmark_count` candidates (thinned inside sparse
/// zones) followed by the listed clusters. Deterministic per seed.
pub fn generate_scene(seed: u64, bounds: Bounds, landmark_count: usize, layout: &ClusterLayout) -> Result<Scene, SimError> {
    if landmark_count == 0 && layout.clusters.is_empty() {
        return Err(SimError::InvalidArgument("scene needs at least one landmark".into()));
    }
    if (0..3).any(|i| !(bounds.max[i] > bounds.min[i])) {
        return Err(SimError::InvalidArgument("empty scene bounds".into()));
    }
    let mut labels: Vec<u32> = layout.clusters.iter().map(|c| c.label).collect();
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(SimError::InvalidArgument("duplicate cluster label".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene { landmarks: Vec::with_capacity(landmark_count), bounds, seed, removed: BTreeMap::new(), next_id: 0 };
    for _ in 0..landmark_count {
        let p = bounds.sample(&mut rng);
        let keep = layout
            .sparse_zones
            .iter()
            .filter(|z| (0..3).all(|i| p[i] >= z.min[i] && p[i] <= z.max[i]))
            .map(|z| z.keep)
            .fold(1.0f64, f64::min);
        let cleared = layout
            .clusters
            .iter()
            .any(|c| c.clearance > 0.0 && (p - Point3::from(c.center)).norm() < c.radius + c.clearance);
        // Draw unconditionally so the stream does not depend on the zones.
        let u: f64 = rng.random();
        if u < keep && !cleared {
            scene.landmarks.push(Landmark { id: PointId(scene.next_id), position: p, cluster: None });
            scene.next_id += 1;
        }
    }
    for spec in &layout.clusters {
        scene.push_cluster(spec, &mut rng);
    }
    Ok(scene)
}

pub fn mutate_scene(scene: &Scene, op: Mutation) -> Result<Scene, SimError> {
    let mut out = scene.clone();
    match op {
        Mutation::RemoveCluster(label) => {
            let (gone, kept): (Vec<Landmark>, Vec<Landmark>) = out.landmarks.into_iter().partition(|l| l.cluster == Some(label));
            if gone.is_empty() {
                return Err(SimError::UnknownCluster(label));
            }
            out.landmarks = kept;
            out.removed.entry(label).or_default().extend(gone);
        }
        Mutation::RestoreCluster(label) => {
            let back = out.removed.remove(&label).ok_or(SimError::UnknownCluster(label))?;
            out.landmarks.extend(back);
            out.landmarks.sort_by_key(|l| l.id);
        }
        Mutation::AddCluster(spec) => {
            if out.landmarks.iter().any(|l| l.cluster == Some(spec.label)) || out.removed.contains_key(&spec.label) {
                return Err(SimError::InvalidArgument(format!("cluster {} already exists", spec.label)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ (u64::from(spec.label) << 40) ^ 0xC1u64);
            out.push_cluster(&spec, &mut rng);
        }
    }
    Ok(out)
}
