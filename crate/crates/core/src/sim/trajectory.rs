//! User motion and distance/rotation-triggered keyframe selection.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::{Point3, Pose};

pub const DEFAULT_D_KF: f64 = 2.0;
pub const DEFAULT_THETA_KF: f64 = 20.0 * std::f64::consts::PI / 180.0;
const EPS: f64 = 1e-9;

/// Position plus heading (yaw, radians). Headings are not wrapped, so a
/// sequence 0 → 2π describes one full turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: [f64; 3],
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    #[serde(default = "default_d_kf")]
    pub d_kf: f64,
    #[serde(default = "default_theta_kf")]
    pub theta_kf: f64,
}

fn default_d_kf() -> f64 {
    DEFAULT_D_KF
}

fn default_theta_kf() -> f64 {
    DEFAULT_THETA_KF
}

impl TrajectorySpec {
    pub fn new(waypoints: Vec<Waypoint>) -> Self {
        Self { waypoints, d_kf: DEFAULT_D_KF, theta_kf: DEFAULT_THETA_KF }
    }

    /// Straight segment from `a` to `b`, facing the direction of travel.
    pub fn line(a: [f64; 3], b: [f64; 3]) -> Self {
        let heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        Self::new(vec![Waypoint { position: a, heading }, Waypoint { position: b, heading }])
    }

    /// Counter-clockwise circle in the z = `center[2]` plane, facing along
    /// the tangent, approximated with `segments_per_loop` chords.
    pub fn circle(center: [f64; 3], radius: f64, start_angle: f64, loops: f64, segments_per_loop: usize) -> Self {
        let n = ((segments_per_loop as f64 * loops).ceil() as usize).max(1);
        let sweep = TAU * loops;
        let waypoints = (0..=n)
            .map(|i| {
                let a = start_angle + sweep * i as f64 / n as f64;
                Waypoint {
                    position: [center[0] + radius * a.cos(), center[1] + radius * a.sin(), center[2]],
                    heading: a + std::f64::consts::FRAC_PI_2,
                }
            })
            .collect();
        Self::new(waypoints)
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| dist(&w[0].position, &w[1].position)).sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.len() < 2 {
            return Err(SimError::InvalidArgument("trajectory needs at least two waypoints".into()));
        }
        if !(self.d_kf > 0.0) || !(self.theta_kf > 0.0) {
            return Err(SimError::InvalidArgument("keyframe spacing must be positive".into()));
        }
        if self.waypoints.iter().any(|w| w.position.iter().chain([&w.heading]).any(|v| !v.is_finite())) {
            return Err(SimError::InvalidArgument("non-finite waypoint".into()));
        }
        Ok(())
    }
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Keyframe poses: the start pose, then one whenever travelled distance
/// reaches `d_kf` or accumulated rotation reaches `theta_kf` since the last
/// keyframe. Motion is linear in position and heading within a segment.
pub fn keyframe_poses(spec: &TrajectorySpec) -> Result<Vec<Pose>, SimError> {
    spec.validate()?;
    let pose_at = |a: &Waypoint, b: &Waypoint, t: f64| {
        let p = Point3::new(
            a.position[0] + (b.position[0] - a.position[0]) * t,
            a.position[1] + (b.position[1] - a.position[1]) * t,
            a.position[2] + (b.position[2] - a.position[2]) * t,
        );
        Pose::looking_along(p, a.heading + (b.heading - a.heading) * t).map_err(SimError::from)
    };
    let first = &spec.waypoints[0];
    let mut poses = vec![pose_at(first, first, 0.0)?];
    let (mut moved, mut turned) = (0.0f64, 0.0f64);
    for w in spec.waypoints.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let len = dist(&a.position, &b.position);
        let rot = (b.heading - a.heading).abs();
        let mut t = 0.0f64;
        loop {
            // Parameter at which either trigger fires next on this segment.
            let t_move = if len > 0.0 { t + (spec.d_kf - moved) / len } else { f64::INFINITY };
            let t_turn = if rot > 0.0 { t + (spec.theta_kf - turned) / rot } else { f64::INFINITY };
            let t_next = t_move.min(t_turn);
            if t_next > 1.0 + EPS {
                moved += (1.0 - t) * len;
                turned += (1.0 - t) * rot;
                break;
            }
            let t_hit = t_next.min(1.0);
            poses.push(pose_at(a, b, t_hit)?);
            moved = 0.0;
            turned = 0.0;
            t = t_hit;
            // Guard against a trigger landing exactly on the segment end.
            if t >= 1.0 - EPS {
                break;
            }
        }
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn straight_path_count() {
        let mut spec = TrajectorySpec::line([0.0; 3], [100.0, 0.0, 0.0]);
        spec.d_kf = 5.0;
        let poses = keyframe_poses(&spec).unwrap();
        assert_eq!(poses.len(), 21);
        assert_relative_eq!(poses[20].position().x, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn in_place_turn_count() {
        let mut spec = TrajectorySpec::new(vec![
            Waypoint { position: [0.0; 3], heading: 0.0 },
            Waypoint { position: [0.0; 3], heading: 2.0 * PI },
        ]);
        spec.theta_kf = PI / 4.0;
        assert_eq!(keyframe_poses(&spec).unwrap().len(), 1 + 8);
    }

    #[test]
    fn zero_length_path_has_one_keyframe() {
        let spec = TrajectorySpec::line([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]);
        assert_eq!(keyframe_poses(&spec).unwrap().len(), 1);
    }

    #[test]
    fn distance_carries_across_segments() {
        let spec = TrajectorySpec {
            waypoints: vec![
                Waypoint { position: [0.0; 3], heading: 0.0 },
                Waypoint { position: [3.0, 0.0, 0.0], heading: 0.0 },
                Waypoint { position: [6.0, 0.0, 0.0], heading: 0.0 },
            ],
            d_kf: 2.0,
            theta_kf: 1.0,
        };
        let xs: Vec<f64> = keyframe_poses(&spec).unwrap().iter().map(|p| p.position().x).collect();
        assert_eq!(xs.len(), 4);
        for (x, want) in xs.iter().zip([0.0, 2.0, 4.0, 6.0]) {
            assert_relative_eq!(*x, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(keyframe_poses(&TrajectorySpec::new(vec![])).is_err());
        let mut s = TrajectorySpec::line([0.0; 3], [1.0, 0.0, 0.0]);
        s.d_kf = 0.0;
        assert!(keyframe_poses(&s).is_err());
    }
}
