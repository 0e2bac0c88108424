//! Geometric kernel: poses, camera intrinsics, view cones and cone sampling.
//!
//! Rotation convention is intrinsic Z-Y-X: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`,
//! applied to the camera-forward axis `+z`. A horizontally mounted camera with
//! heading `psi` is therefore `Pose { roll: 0, pitch: pi/2, yaw: psi }`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// Largest apex angle a cone may take after oversharing.
pub const FOV_CLAMP_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pose fields must be finite")]
    NonFinitePose,
    #[error("invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")]
    InvalidIntrinsics { fx: f64, fy: f64, cx: f64, cy: f64 },
    #[error("invalid view cone: h={h} fov={fov}")]
    InvalidCone { h: f64, fov: f64 },
    #[error("oversharing factor must be >= 1, got {0}")]
    InvalidOversharing(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut a = a % TAU;
    if a > PI {
        a -= TAU;
    } else if a <= -PI {
        a += TAU;
    }
    a
}

/// 6-DoF camera pose in the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    x: f64,
    y: f64,
    z: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Result<Self, GeometryError> {
        if ![x, y, z, roll, pitch, yaw].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        Ok(Self {
            x,
            y,
            z,
            roll: normalize_angle(roll),
            pitch: normalize_angle(pitch),
            yaw: normalize_angle(yaw),
        })
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, z: 0.0, roll: 0.0, pitch: 0.0, yaw: 0.0 }
    }

    /// Horizontal camera at `position` looking along heading `yaw` in the xy-plane.
    pub fn looking_along(position: Point3, heading: f64) -> Result<Self, GeometryError> {
        Self::new(position.x, position.y, position.z, 0.0, PI / 2.0, heading)
    }

    pub fn from_parts(position: Point3, rotation: &Rotation3<f64>) -> Result<Self, GeometryError> {
        let (roll, pitch, yaw) = euler_zyx(rotation);
        Self::new(position.x, position.y, position.z, roll, pitch, yaw)
    }

    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }
    pub fn roll(&self) -> f64 {
        self.roll
    }
    pub fn pitch(&self) -> f64 {
        self.pitch
    }
    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }
}

/// Euler angles `(roll, pitch, yaw)` of a rotation under the Z-Y-X convention.
///
/// Pitch is taken through `atan2` so it stays well conditioned near +-pi/2.
pub fn euler_zyx(rot: &Rotation3<f64>) -> (f64, f64, f64) {
    let m = rot.matrix();
    let cos_pitch = (m[(0, 0)] * m[(0, 0)] + m[(1, 0)] * m[(1, 0)]).sqrt();
    let pitch = (-m[(2, 0)]).atan2(cos_pitch);
    if cos_pitch > 1e-9 {
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        (roll, pitch, yaw)
    } else {
        // Gimbal lock: only yaw -/+ roll is observable, put it all in yaw.
        (0.0, pitch, (-m[(0, 1)]).atan2(m[(1, 1)]))
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let intr = Self { fx, fy, cx, cy };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy })
        }
    }

    /// Table presets of the evaluated camera settings.
    pub fn preset(name: &str) -> Option<Self> {
        let (fx, fy, cx, cy) = match name {
            "garage-1280x720" => (634.2, 634.8, 631.8, 359.5),
            "garage-848x480" => (423.7, 423.0, 419.6, 239.7),
            "garage-640x480" => (383.4, 383.7, 316.5, 239.6),
            "euroc" => (458.7, 457.3, 367.2, 248.4),
            "future-city" => (455.0, 455.0, 376.0, 240.0),
            _ => return None,
        };
        Some(Self { fx, fy, cx, cy })
    }

    pub const PRESETS: [&'static str; 5] =
        ["garage-1280x720", "garage-848x480", "garage-640x480", "euroc", "future-city"];
}

/// Full apex angle covering both image axes: `max(2 atan(cx/fx), 2 atan(cy/fy))`.
pub fn compute_fov(intr: &CameraIntrinsics) -> Result<f64, GeometryError> {
    intr.validate()?;
    let horizontal = 2.0 * (intr.cx / intr.fx).atan();
    let vertical = 2.0 * (intr.cy / intr.fy).atan();
    Ok(horizontal.max(vertical))
}

/// Unit optical axis of a pose (camera `+z` rotated into the global frame).
pub fn optical_axis(p: &Pose) -> Vector3 {
    (p.rotation() * Vector3::z()).normalize()
}

pub fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    nalgebra::distance(&a.position(), &b.position())
}

/// Angle in `[0, pi]` between the optical axes of two poses.
pub fn pose_angle(a: &Pose, b: &Pose) -> f64 {
    vector_angle(&optical_axis(a), &optical_axis(b))
}

pub fn vector_angle(a: &Vector3, b: &Vector3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Right circular cone with apex at the camera center, opening along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewCone {
    apex_pose: Pose,
    h: f64,
    fov: f64,
    axis: Vector3,
}

impl ViewCone {
    pub fn new(apex_pose: Pose, h: f64, fov: f64) -> Result<Self, GeometryError> {
        if !(h.is_finite() && h > 0.0 && fov.is_finite() && fov > 0.0 && fov < PI) {
            return Err(GeometryError::InvalidCone { h, fov });
        }
        Ok(Self { apex_pose, h, fov, axis: optical_axis(&apex_pose) })
    }

    /// Cone whose apex angle is `alpha * base_fov`, clamped just below pi.
    pub fn overshared(apex_pose: Pose, h: f64, base_fov: f64, alpha: f64) -> Result<Self, GeometryError> {
        if !(alpha.is_finite() && alpha >= 1.0) {
            return Err(GeometryError::InvalidOversharing(alpha));
        }
        Self::new(apex_pose, h, (alpha * base_fov).min(PI - FOV_CLAMP_EPS))
    }

    pub fn apex_pose(&self) -> &Pose {
        &self.apex_pose
    }
    pub fn apex(&self) -> Point3 {
        self.apex_pose.position()
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn fov(&self) -> f64 {
        self.fov
    }
    pub fn axis(&self) -> Vector3 {
        self.axis
    }
    pub fn half_angle(&self) -> f64 {
        0.5 * self.fov
    }

    pub fn volume(&self) -> f64 {
        let t = self.half_angle().tan();
        PI / 3.0 * self.h.powi(3) * t * t
    }

    /// Distance from the apex to the rim; every contained point lies within it.
    pub fn slant_height(&self) -> f64 {
        self.h / self.half_angle().cos()
    }

    pub fn contains(&self, q: &Point3) -> bool {
        let d = q - self.apex();
        let axial = d.dot(&self.axis);
        if d.norm_squared() == 0.0 {
            return true;
        }
        if axial < 0.0 || axial > self.h {
            return false;
        }
        let radial = (d - self.axis * axial).norm();
        radial.atan2(axial) <= self.half_angle()
    }

    /// Angle between the axis and the ray towards `q`.
    pub fn off_axis_angle(&self, q: &Point3) -> f64 {
        let d = q - self.apex();
        vector_angle(&self.axis, &d)
    }

    /// Orthonormal basis `(e1, e2)` spanning the plane perpendicular to the axis.
    fn lateral_basis(&self) -> (Vector3, Vector3) {
        let axis = Unit::new_normalize(self.axis);
        let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = axis.cross(&helper).normalize();
        let e2 = axis.cross(&e1).normalize();
        (e1, e2)
    }
}

/// View cone with its apex at the pose and its apex angle derived from intrinsics.
pub fn make_view_cone(p: Pose, intr: &CameraIntrinsics, h: f64, alpha: f64) -> Result<ViewCone, GeometryError> {
    let base = compute_fov(intr)?;
    ViewCone::overshared(p, h, base, alpha)
}

/// Mean sample spacing `(V / k)^(1/3)` for `k` samples filling the cone.
pub fn sample_spacing(cone: &ViewCone, k: usize) -> f64 {
    (cone.volume() / k as f64).cbrt()
}

// Irrational strides for the per-layer Kronecker sequence.
const AXIAL_STRIDE: f64 = 0.754_877_666_246_692_7; // 1 / plastic number
const GOLDEN_STRIDE: f64 = 0.618_033_988_749_894_8;

/// Deterministic near-uniform samples inside the cone plus their mean spacing.
///
/// The cone is cut into axial layers of equal volume; within a layer points
/// follow a sunflower spiral in the cross-section and a Kronecker sequence
/// along the axis, rotated by seeded offsets.
pub fn sample_cone(cone: &ViewCone, k: usize, seed: u64) -> Result<(Vec<Point3>, f64), GeometryError> {
    if k == 0 {
        return Err(GeometryError::InvalidArgument("sample count must be >= 1"));
    }
    let r = sample_spacing(cone, k);
    let apex = cone.apex();
    let axis = cone.axis();
    if k == 1 {
        return Ok((vec![apex + axis * (0.75 * cone.h())], r));
    }
    let (e1, e2) = cone.lateral_basis();
    let tan_half = cone.half_angle().tan();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = ((k as f64).cbrt().round() as usize).max(1);
    let mut points = Vec::with_capacity(k);
    for layer in 0..layers {
        let n = k / layers + usize::from(layer < k % layers);
        let axial_offset: f64 = rng.random();
        let spin_offset: f64 = rng.random();
        for i in 0..n {
            let jitter: f64 = rng.random_range(-0.25..0.25);
            let radial_frac = (i as f64 + 0.5 + jitter) / n as f64;
            let within = (i as f64 * AXIAL_STRIDE + axial_offset).fract();
            let vol_frac = (layer as f64 + within) / layers as f64;
            let depth = cone.h() * vol_frac.cbrt();
            let radius = depth * tan_half * radial_frac.sqrt();
            let phi = TAU * (i as f64 * GOLDEN_STRIDE + spin_offset).fract();
            points.push(apex + axis * depth + (e1 * phi.cos() + e2 * phi.sin()) * radius);
        }
    }
    Ok((points, r))
}
