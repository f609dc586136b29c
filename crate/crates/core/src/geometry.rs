//! Rigid-body arithmetic, pinhole projection and Plücker lines.
//!
//! Poses map world coordinates into the camera frame: `x_cam = R * X + t`.
//! Twists are ordered `(omega, v)` with the rotation part first, and pose
//! updates are applied on the left: `T <- exp(delta) * T`.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;

/// Camera-frame depth below which a point counts as behind the camera.
pub const Z_MIN: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;
const QUAT_DRIFT_TOL: f64 = 1e-12;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(&b)`.
#[rustfmt::skip]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    )
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds the world-to-camera pose of a camera centred at `center`
    /// whose camera-to-world rotation is `cam_to_world`.
    pub fn from_center(cam_to_world: UnitQuaternion<f64>, center: Vec3) -> Self {
        let rotation = cam_to_world.inverse();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Maps a world point into this frame.
    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates, `-R^T t`.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Left-multiplicative update `exp(delta) * self`.
    pub fn retract(&self, delta: &Vec6) -> Pose {
        se3_exp(delta).compose(self)
    }

    /// Same rotation, translation multiplied by `s`.
    pub fn with_scaled_translation(&self, s: f64) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let n = q.quaternion().norm();
    if (n - 1.0).abs() > QUAT_DRIFT_TOL {
        UnitQuaternion::new_normalize(*q.quaternion())
    } else {
        q
    }
}

/// SO(3) exponential as a unit quaternion.
pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (real, imag) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::from_parts(real, omega * imag))
}

/// SO(3) logarithm, rotation vector with norm in `[0, pi]`.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let (w, v) = if q.scalar() < 0.0 {
        (-q.scalar(), -q.vector().into_owned())
    } else {
        (q.scalar(), q.vector().into_owned())
    };
    let vn = v.norm();
    if vn < SMALL_ANGLE {
        // 2 * atan(vn / w) / vn ~ 2 / w for small angles
        v * (2.0 / w)
    } else {
        let theta = 2.0 * vn.atan2(w);
        v * (theta / vn)
    }
}

/// Left Jacobian `V` of SE(3), mapping `v` to the translation of `exp(omega, v)`.
fn se3_v(omega: &Vec3) -> Mat3 {
    let theta_sq = omega.norm_squared();
    let w = skew(omega);
    let w2 = w * w;
    if theta_sq.sqrt() < SMALL_ANGLE {
        Mat3::identity() + 0.5 * w + w2 / 6.0
    } else {
        let theta = theta_sq.sqrt();
        let a = (1.0 - theta.cos()) / theta_sq;
        let b = (theta - theta.sin()) / (theta_sq * theta);
        Mat3::identity() + a * w + b * w2
    }
}

fn se3_v_inv(omega: &Vec3) -> Mat3 {
    let theta_sq = omega.norm_squared();
    let w = skew(omega);
    let w2 = w * w;
    if theta_sq.sqrt() < SMALL_ANGLE {
        Mat3::identity() - 0.5 * w + w2 / 12.0
    } else {
        let theta = theta_sq.sqrt();
        let c = (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta_sq;
        Mat3::identity() - 0.5 * w + c * w2
    }
}

/// Exponential map from a twist `(omega, v)` to a pose.
pub fn se3_exp(twist: &Vec6) -> Pose {
    let omega = Vec3::new(twist[0], twist[1], twist[2]);
    let v = Vec3::new(twist[3], twist[4], twist[5]);
    Pose {
        rotation: so3_exp(&omega),
        translation: se3_v(&omega) * v,
    }
}

/// Logarithm map, inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(pose: &Pose) -> Vec6 {
    let omega = so3_log(&pose.rotation);
    let v = se3_v_inv(&omega) * pose.translation;
    Vec6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput(format!(
                "intrinsics need positive focal lengths and image size, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Normalized image coordinates `(x/z, y/z, 1)` of a pixel.
    pub fn unproject(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Pixel of a camera-frame point, `None` when `z <= Z_MIN`.
    pub fn project_camera_point(&self, p: &Vec3) -> Option<Vec2> {
        if p.z <= Z_MIN {
            return None;
        }
        Some(Vec2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < f64::from(self.width)
            && pixel.y < f64::from(self.height)
    }
}

/// Static scene point in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub position: Vec3,
}

impl Landmark {
    pub fn new(id: u64, position: Vec3) -> Self {
        Self { id, position }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
    }
}

/// Projects `landmark` through `pose` and `k`; `None` when behind the camera.
pub fn project(k: &CameraIntrinsics, pose: &Pose, landmark: &Vec3) -> Option<Vec2> {
    k.project_camera_point(&pose.transform(landmark))
}

/// Infinite line `{ p : d x p + m = 0 }` with unit direction `d` and moment `m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerRay {
    pub direction: Vec3,
    pub moment: Vec3,
}

impl PluckerRay {
    /// Line through `point` along `direction` (normalized here).
    pub fn through(point: &Vec3, direction: &Vec3) -> Self {
        let d = direction.normalize();
        Self {
            direction: d,
            moment: point.cross(&d),
        }
    }

    /// Vector `d x X + m`; its norm is the distance when `|d| = 1`.
    pub fn moment_residual(&self, x: &Vec3) -> Vec3 {
        self.direction.cross(x) + self.moment
    }

    /// Point on the line closest to the origin.
    pub fn closest_point_to_origin(&self) -> Vec3 {
        self.direction.cross(&self.moment) / self.direction.norm_squared()
    }
}

/// Back-projects `pixel` from the camera at `pose` into a world-frame line.
pub fn plucker_from_camera(pose: &Pose, pixel: &Vec2, k: &CameraIntrinsics) -> PluckerRay {
    let bearing = k.unproject(pixel);
    let d = (pose.rotation.inverse() * bearing).normalize();
    PluckerRay::through(&pose.camera_center(), &d)
}

/// Perpendicular distance between `x` and `ray`, `|d x X + m| / |d|`.
pub fn ray_point_distance(ray: &PluckerRay, x: &Vec3) -> f64 {
    ray.moment_residual(x).norm() / ray.direction.norm()
}
