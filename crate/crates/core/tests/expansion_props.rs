use std::collections::BTreeSet;

use mapshare::expansion::*;
use mapshare::geometry::{Point3, Pose};
use mapshare::ids::{ClientId, FrameId, KeyframeId, PointId};
use mapshare::map_store::{GlobalMap, MapConfig, NewFrame, PointRecord};
use mapshare::overlap::{assess_overlap, OverlapVerdict};
use mapshare::wire::SampleClass;
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FOV: f64 = 1.381;

fn scene_map(seed: u64) -> GlobalMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = GlobalMap::new(MapConfig::default());
    for f in 0..rng.random_range(0..6u64) {
        let pose = Pose::looking_along(Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0), rng.random_range(-0.8..0.8)).unwrap();
        let recs: Vec<PointRecord> = (0..rng.random_range(10..300u64))
            .map(|i| PointRecord {
                id: PointId(f * 1000 + i),
                position: Point3::new(rng.random_range(0.0..20.0), rng.random_range(-12.0..12.0), rng.random_range(-8.0..8.0)),
                descriptor: [0; 32],
            })
            .collect();
        map.insert_frame(NewFrame { frame_id: FrameId(f), client_id: ClientId(1), keyframe_id: KeyframeId(0), pose, fov: FOV, timestamp: 0 }, &recs)
            .unwrap();
    }
    map
}

fn keyframe(seed: u64, n: usize) -> Keyframe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    Keyframe {
        keyframe_id: KeyframeId(1),
        pose: Pose::looking_along(Point3::origin(), 0.0).unwrap(),
        fov: FOV,
        points: (0..n)
            .map(|i| KeyframePoint {
                landmark_id: PointId(50_000 + i as u64),
                position: Point3::new(rng.random_range(0.0..20.0), rng.random_range(-12.0..12.0), rng.random_range(-8.0..8.0)),
                descriptor: [0; 32],
                local_observation_count: rng.random_range(1..12),
            })
            .collect(),
    }
}

fn complement(v: &OverlapVerdict) -> mapshare::wire::OverlapResponseMsg {
    // Same verdict, the other list.
    let resp = build_response(v);
    let (status, list) = match resp.status {
        SampleClass::Redundant => (SampleClass::Fresh, &v.fresh_samples),
        SampleClass::Fresh => (SampleClass::Redundant, &v.redundant_samples),
    };
    mapshare::wire::OverlapResponseMsg { status, r: resp.r, samples: list.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect() }
}

fn ids(kf: &Keyframe) -> BTreeSet<PointId> {
    kf.points.iter().map(|p| p.landmark_id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_inject_contract(seed in any::<u64>(), n in 0usize..300, k in 10usize..400) {
        let map = scene_map(seed);
        let kf = keyframe(seed, n);
        let v = assess_overlap(&map, &kf.pose, FOV, k, 0.9, seed).unwrap();
        let resp = build_response(&v);
        prop_assert_eq!(resp.samples.len(), v.redundant_samples.len().min(v.fresh_samples.len()));
        let pruned = partition_keyframe(&kf, &resp);

        // Either list gives the same answer wherever the samples around a
        // point agree on one class.
        let r = resp.r as f64;
        let near = |p: &Point3, list: &[Point3]| list.iter().any(|s| (p - wire_point(&[s.x as f32, s.y as f32, s.z as f32])).norm() <= r);
        let other = ids(&partition_keyframe(&kf, &complement(&v)));
        let kept = ids(&pruned);
        for p in &kf.points {
            if near(&p.position, &v.redundant_samples) != near(&p.position, &v.fresh_samples) {
                prop_assert_eq!(kept.contains(&p.landmark_id), other.contains(&p.landmark_id));
            }
        }

        // Nothing kept sits within r of a redundant sample, except, when only
        // the fresh list travelled, points that are also next to a fresh one.
        for p in &pruned.points {
            if near(&p.position, &v.redundant_samples) {
                prop_assert!(resp.status == SampleClass::Fresh && near(&p.position, &v.fresh_samples));
            }
        }

        // Conservation, and injection only moves removed points back.
        let removed: BTreeSet<_> = ids(&kf).difference(&ids(&pruned)).copied().collect();
        prop_assert_eq!(pruned.points.len() + removed.len(), kf.points.len());
        let injected = inject_redundancy(&pruned, &kf);
        let extra: BTreeSet<_> = ids(&injected).difference(&ids(&pruned)).copied().collect();
        prop_assert!(extra.is_subset(&removed));
        prop_assert!(ids(&pruned).is_subset(&ids(&injected)));
        let mean = mean_observation_count(&kf);
        for p in injected.points.iter().filter(|p| extra.contains(&p.landmark_id)) {
            prop_assert!(f64::from(p.local_observation_count) > mean);
        }
        // Every removed point above the mean comes back.
        for p in kf.points.iter().filter(|p| removed.contains(&p.landmark_id)) {
            prop_assert_eq!(extra.contains(&p.landmark_id), f64::from(p.local_observation_count) > mean);
        }
    }

    #[test]
    fn alignment_is_equivariant(seed in any::<u64>(), g in (-3.1..3.1f64, -1.5..1.5f64, -3.1..3.1f64, -20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = RigidTransform::new(Rotation3::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.4..1.4), rng.random_range(-3.0..3.0)), Vector3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), 1.0));
        let pairs: Vec<(Point3, Point3)> = (0..40)
            .map(|_| {
                let l = Point3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0));
                let noise = Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
                (l, truth.apply(&l) + noise)
            })
            .collect();
        let g = RigidTransform::new(Rotation3::from_euler_angles(g.0, g.1, g.2), Vector3::new(g.3, g.4, g.5));
        let a = estimate_alignment(&pairs).unwrap().transform;
        let moved: Vec<(Point3, Point3)> = pairs.iter().map(|(l, w)| (g.apply(l), *w)).collect();
        let b = estimate_alignment(&moved).unwrap().transform;
        let expect = a.compose(&g.inverse());
        prop_assert!((b.rotation.matrix() - expect.rotation.matrix()).abs().max() < 1e-9);
        prop_assert!((b.translation - expect.translation).norm() < 1e-9);
        prop_assert!(b.orthonormality_error() < 1e-9);
    }
}

#[test]
fn alignment_rejects_degenerate_input() {
    let line: Vec<(Point3, Point3)> = (0..10).map(|i| (Point3::new(i as f64, 0.0, 0.0), Point3::new(i as f64, 1.0, 0.0))).collect();
    assert!(estimate_alignment(&line).is_err());
    assert!(estimate_alignment(&line[..2]).is_err());
}

#[test]
fn upload_pipeline_matches_set_oracle() {
    let mut map = GlobalMap::new(MapConfig::default());
    let mut oracle = BTreeSet::new();
    for seed in 0..20u64 {
        let mut kf = keyframe(seed, 200);
        // Half the ids repeat across keyframes.
        for (i, p) in kf.points.iter_mut().enumerate() {
            p.landmark_id = PointId(if i % 2 == 0 { i as u64 } else { seed * 1000 + i as u64 });
        }
        let v = assess_overlap(&map, &kf.pose, FOV, 200, 0.9, seed).unwrap();
        let sent = inject_redundancy(&partition_keyframe(&kf, &build_response(&v)), &kf);
        oracle.extend(ids(&sent));
        integrate_upload(&mut map, &sent.to_upload(ClientId(1)), &RigidTransform::identity(), seed).unwrap();
    }
    let stored: BTreeSet<PointId> = map.points().map(|p| p.id).collect();
    assert_eq!(stored, oracle);
    assert!(map.audit().is_clean());
}
