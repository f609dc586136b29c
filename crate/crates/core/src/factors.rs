//! Residuals and analytic Jacobians for every factor kind.
//!
//! Pose Jacobians are taken with respect to a left twist `(omega, v)`
//! applied as `exp(delta) * T`, which perturbs a camera-frame point `x`
//! by `omega x x + v`.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3x6, RowVector3, RowVector6, SMatrix, SVector, UnitQuaternion};

use crate::geometry::{skew, CameraIntrinsics, Mat3, PluckerRay, Pose, Vec2, Vec3, Z_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Reprojection,
    RayDistance,
    DepthPrior,
    RelativePose,
}

impl FactorKind {
    pub fn name(&self) -> &'static str {
        match self {
            FactorKind::Reprojection => "reprojection",
            FactorKind::RayDistance => "ray",
            FactorKind::DepthPrior => "depth",
            FactorKind::RelativePose => "relpose",
        }
    }

    /// Factors that carry metric information.
    pub fn is_metric(&self) -> bool {
        matches!(self, FactorKind::RayDistance | FactorKind::DepthPrior)
    }
}

/// Whether a ray stays fixed in the world during a solve or follows its pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RayAnchor {
    #[default]
    Fixed,
    Variable,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    /// Observed pixel.
    Pixel(Vec2),
    /// World-frame line plus the pixel it was lifted from.
    Ray {
        ray: PluckerRay,
        pixel: Vec2,
        anchor: RayAnchor,
    },
    /// `log` of the metric depth prior.
    LogDepth(f64),
    /// Relative rotation and unit translation direction mapping camera
    /// `pose_ids[1]` coordinates into camera `pose_ids[0]`.
    Relative {
        rotation: UnitQuaternion<f64>,
        direction: Vec3,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub pose_ids: Vec<usize>,
    pub landmark_id: Option<usize>,
    pub measurement: Measurement,
    pub information: f64,
    pub robust_delta: f64,
}

impl Factor {
    pub fn reprojection(pose: usize, landmark: usize, pixel: Vec2, information: f64, delta: f64) -> Self {
        Self {
            pose_ids: vec![pose],
            landmark_id: Some(landmark),
            measurement: Measurement::Pixel(pixel),
            information,
            robust_delta: delta,
        }
    }

    pub fn ray(pose: usize, landmark: usize, ray: PluckerRay, pixel: Vec2, information: f64, delta: f64) -> Self {
        Self {
            pose_ids: vec![pose],
            landmark_id: Some(landmark),
            measurement: Measurement::Ray {
                ray,
                pixel,
                anchor: RayAnchor::Fixed,
            },
            information,
            robust_delta: delta,
        }
    }

    pub fn depth_prior(pose: usize, landmark: usize, prior_depth: f64, information: f64, delta: f64) -> Self {
        Self {
            pose_ids: vec![pose],
            landmark_id: Some(landmark),
            measurement: Measurement::LogDepth(prior_depth.ln()),
            information,
            robust_delta: delta,
        }
    }

    pub fn relative_pose(
        pose_i: usize,
        pose_j: usize,
        rotation: UnitQuaternion<f64>,
        direction: Vec3,
        information: f64,
        delta: f64,
    ) -> Self {
        Self {
            pose_ids: vec![pose_i, pose_j],
            landmark_id: None,
            measurement: Measurement::Relative {
                rotation,
                direction: direction.normalize(),
            },
            information,
            robust_delta: delta,
        }
    }

    pub fn kind(&self) -> FactorKind {
        match self.measurement {
            Measurement::Pixel(_) => FactorKind::Reprojection,
            Measurement::Ray { .. } => FactorKind::RayDistance,
            Measurement::LogDepth(_) => FactorKind::DepthPrior,
            Measurement::Relative { .. } => FactorKind::RelativePose,
        }
    }

    /// Whether the factor's residual depends on its pose(s).
    pub fn depends_on_pose(&self) -> bool {
        !matches!(
            self.measurement,
            Measurement::Ray {
                anchor: RayAnchor::Fixed,
                ..
            }
        )
    }

    pub fn is_valid(&self) -> bool {
        let shape_ok = match self.measurement {
            Measurement::Pixel(_) | Measurement::LogDepth(_) | Measurement::Ray { .. } => {
                self.pose_ids.len() == 1 && self.landmark_id.is_some()
            }
            Measurement::Relative { .. } => self.pose_ids.len() == 2 && self.landmark_id.is_none(),
        };
        shape_ok && self.information >= 0.0 && self.information.is_finite() && self.robust_delta > 0.0
    }

    /// Residual and Jacobians at the given variable values.
    ///
    /// `poses` holds the values of `pose_ids` in order; `landmark` is the
    /// landmark value when the factor has one.
    pub fn linearize(&self, poses: &[Pose], landmark: Option<&Vec3>, k: &CameraIntrinsics) -> Linearization {
        let mut out = DynamicSink {
            n_poses: self.pose_ids.len(),
            out: None,
        };
        self.linearize_into(poses, landmark, k, &mut out);
        out.out.unwrap_or_else(|| Linearization::inactive(self.residual_dim(), self.pose_ids.len()))
    }

    /// Residual dimension of the measurement.
    pub fn residual_dim(&self) -> usize {
        match self.measurement {
            Measurement::Pixel(_) => 2,
            Measurement::Ray { .. } => 3,
            Measurement::LogDepth(_) => 1,
            Measurement::Relative { .. } => 12,
        }
    }

    /// Allocation-free linearization: hands fixed-size blocks to `sink`.
    /// Nothing is passed for inactive factors.
    pub fn linearize_into<S: LinearizationSink>(
        &self,
        poses: &[Pose],
        landmark: Option<&Vec3>,
        k: &CameraIntrinsics,
        sink: &mut S,
    ) {
        match &self.measurement {
            Measurement::Pixel(px) => {
                let x = landmark.expect("reprojection factor needs a landmark");
                if let Some((r, jp, jl)) = reprojection_residual(px, &poses[0], x, k) {
                    sink.accept(&r, [Some(&jp), None], Some(&jl));
                }
            }
            Measurement::Ray { ray, pixel, anchor } => {
                let x = landmark.expect("ray factor needs a landmark");
                match anchor {
                    RayAnchor::Fixed => {
                        let (r, jl) = ray_residual_vector(ray, x);
                        sink.accept::<3>(&r, [None, None], Some(&jl));
                    }
                    RayAnchor::Variable => {
                        let (r, jp, jl) = ray_residual_anchored_to_pose(&poses[0], pixel, k, x);
                        sink.accept(&r, [Some(&jp), None], Some(&jl));
                    }
                }
            }
            Measurement::LogDepth(log_prior) => {
                let x = landmark.expect("depth factor needs a landmark");
                if let Some((r, jp, jl)) = depth_prior_residual(*log_prior, &poses[0], x) {
                    sink.accept(&SVector::<f64, 1>::new(r), [Some(&jp), None], Some(&jl));
                }
            }
            Measurement::Relative { rotation, direction } => {
                let (r, ji, jj) = relative_pose_residual(rotation, direction, &poses[0], &poses[1]);
                sink.accept(&r, [Some(&ji), Some(&jj)], None);
            }
        }
    }
}

/// Receives one active linearized factor with `R` residual rows.
/// Pose Jacobians follow `pose_ids`; `None` marks a block without dependence.
pub trait LinearizationSink {
    fn accept<const R: usize>(
        &mut self,
        residual: &SVector<f64, R>,
        jac_poses: [Option<&SMatrix<f64, R, 6>>; 2],
        jac_landmark: Option<&SMatrix<f64, R, 3>>,
    );
}

struct DynamicSink {
    n_poses: usize,
    out: Option<Linearization>,
}

impl LinearizationSink for DynamicSink {
    fn accept<const R: usize>(
        &mut self,
        residual: &SVector<f64, R>,
        jac_poses: [Option<&SMatrix<f64, R, 6>>; 2],
        jac_landmark: Option<&SMatrix<f64, R, 3>>,
    ) {
        self.out = Some(Linearization {
            residual: DVector::from_column_slice(residual.as_slice()),
            jac_poses: jac_poses[..self.n_poses]
                .iter()
                .map(|j| j.map(|j| DMatrix::from_column_slice(R, 6, j.as_slice())))
                .collect(),
            jac_landmark: jac_landmark.map(|j| DMatrix::from_column_slice(R, 3, j.as_slice())),
            active: true,
        });
    }
}

/// Linearized factor. Inactive factors (behind the camera) carry zeros.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jac_poses: Vec<Option<DMatrix<f64>>>,
    pub jac_landmark: Option<DMatrix<f64>>,
    pub active: bool,
}

impl Linearization {
    fn inactive(dim: usize, n_poses: usize) -> Self {
        Self {
            residual: DVector::zeros(dim),
            jac_poses: vec![None; n_poses],
            jac_landmark: None,
            active: false,
        }
    }
}

/// IRLS weight of the Huber loss: 1 inside `delta`, `delta / |r|` outside.
pub fn huber_weight(residual_norm: f64, delta: f64) -> f64 {
    if residual_norm <= delta {
        1.0
    } else {
        delta / residual_norm
    }
}

/// Huber loss on a residual norm, equal to `e^2` inside `delta`.
pub fn huber_cost(residual_norm: f64, delta: f64) -> f64 {
    if residual_norm <= delta {
        residual_norm * residual_norm
    } else {
        2.0 * delta * residual_norm - delta * delta
    }
}

/// `d x / d delta` for a camera-frame point `x`.
fn point_twist_jacobian(x_cam: &Vec3) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(x_cam)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    j
}

/// `observed - project(pose, x)` with Jacobians w.r.t. the pose twist and
/// the landmark. `None` when the point is behind the camera.
pub fn reprojection_residual(
    observed: &Vec2,
    pose: &Pose,
    x: &Vec3,
    k: &CameraIntrinsics,
) -> Option<(Vec2, Matrix2x6<f64>, Matrix2x3<f64>)> {
    let xc = pose.transform(x);
    let predicted = k.project_camera_point(&xc)?;
    let iz = 1.0 / xc.z;
    let d_proj = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    );
    let jp = -d_proj * point_twist_jacobian(&xc);
    let jl = -d_proj * pose.rotation_matrix();
    Some((observed - predicted, jp, jl))
}

/// Vector form `d x X + m` of the ray residual and its Jacobian in `X`.
/// Its norm is the point-to-line distance.
pub fn ray_residual_vector(ray: &PluckerRay, x: &Vec3) -> (Vec3, Mat3) {
    (ray.moment_residual(x), skew(&ray.direction))
}

/// Scalar point-to-line distance and its gradient in `X`. The gradient is
/// zero on the line, where the distance is not differentiable.
pub fn ray_distance_residual(ray: &PluckerRay, x: &Vec3) -> (f64, RowVector3<f64>) {
    let (r, j) = ray_residual_vector(ray, x);
    let n = r.norm();
    let scale = ray.direction.norm();
    if n == 0.0 {
        (0.0, RowVector3::zeros())
    } else {
        (n / scale, (r.transpose() * j) / (n * scale))
    }
}

/// Ray residual when the line is re-derived from the current pose:
/// `d = R^T b / |b|`, `c = -R^T t`, `r = d x (X - c)`.
pub fn ray_residual_anchored_to_pose(
    pose: &Pose,
    pixel: &Vec2,
    k: &CameraIntrinsics,
    x: &Vec3,
) -> (Vec3, Matrix3x6<f64>, Mat3) {
    let b = k.unproject(pixel).normalize();
    let rt = pose.rotation_matrix().transpose();
    let d = rt * b;
    let c = pose.camera_center();
    let rel = x - c;
    let r = d.cross(&rel);
    let mut jp = Matrix3x6::zeros();
    // d' = d + R^T [b]x omega, c' = c - R^T v
    jp.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-skew(&rel) * rt * skew(&b)));
    jp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&d) * rt));
    (r, jp, skew(&d))
}

/// `log(z) - log_prior` for the camera-frame depth `z`.
pub fn depth_prior_residual(log_prior: f64, pose: &Pose, x: &Vec3) -> Option<(f64, RowVector6<f64>, RowVector3<f64>)> {
    let xc = pose.transform(x);
    if xc.z <= Z_MIN {
        return None;
    }
    let dz = RowVector3::new(0.0, 0.0, 1.0 / xc.z);
    let jp = dz * point_twist_jacobian(&xc);
    let jl = dz * pose.rotation_matrix();
    Some((xc.z.ln() - log_prior, jp, jl))
}

/// Loop-edge residual: chordal rotation error (9) stacked with the unit
/// translation direction error (3). The translation magnitude is free.
pub fn relative_pose_residual(
    rotation: &UnitQuaternion<f64>,
    direction: &Vec3,
    pose_i: &Pose,
    pose_j: &Pose,
) -> (SVector<f64, 12>, SMatrix<f64, 12, 6>, SMatrix<f64, 12, 6>) {
    let ri = pose_i.rotation_matrix();
    let rj = pose_j.rotation_matrix();
    let r_rel = ri * rj.transpose();
    let r_meas = rotation.to_rotation_matrix().into_inner();
    let t_rel = pose_i.translation - r_rel * pose_j.translation;

    let mut r = SVector::<f64, 12>::zeros();
    let mut ji = SMatrix::<f64, 12, 6>::zeros();
    let mut jj = SMatrix::<f64, 12, 6>::zeros();
    for c in 0..3 {
        let col = r_rel.column(c).into_owned();
        let diff = col - r_meas.column(c);
        r.fixed_rows_mut::<3>(3 * c).copy_from(&diff);
        // d col / d omega_i = -[col]x ; d col / d omega_j = R_rel [e_c]x
        ji.fixed_view_mut::<3, 3>(3 * c, 0).copy_from(&(-skew(&col)));
        let mut e = Vec3::zeros();
        e[c] = 1.0;
        jj.fixed_view_mut::<3, 3>(3 * c, 0).copy_from(&(r_rel * skew(&e)));
    }
    let n = t_rel.norm().max(1e-12);
    let u = t_rel / n;
    r.fixed_rows_mut::<3>(9).copy_from(&(u - direction));
    let p = (Mat3::identity() - u * u.transpose()) / n;
    ji.fixed_view_mut::<3, 3>(9, 0).copy_from(&(p * -skew(&t_rel)));
    ji.fixed_view_mut::<3, 3>(9, 3).copy_from(&p);
    jj.fixed_view_mut::<3, 3>(9, 3).copy_from(&(p * -r_rel));
    (r, ji, jj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{plucker_from_camera, project, se3_exp, Vec6};

    #[test]
    fn huber_examples() {
        assert_eq!(huber_weight(0.0, 0.05), 1.0);
        assert_eq!(huber_weight(0.1, 0.05), 0.5);
        assert_eq!(huber_weight(0.05, 0.05), 1.0);
    }

    #[test]
    fn huber_cost_is_c1_at_delta() {
        let delta = 0.1;
        let h = 1e-7;
        let left = huber_cost(delta - h, delta);
        let right = huber_cost(delta + h, delta);
        let mid = huber_cost(delta, delta);
        assert!((left - mid).abs() < 3.0 * delta * h);
        assert!((right - mid).abs() < 3.0 * delta * h);
        let d_left = (mid - left) / h;
        let d_right = (right - mid) / h;
        assert!((d_left - 2.0 * delta).abs() < 1e-5);
        assert!((d_right - 2.0 * delta).abs() < 1e-5);
        // rho'(e) = 2 e w(e) on both sides
        for e in [0.05, 0.1, 0.3, 2.0] {
            let num = (huber_cost(e + h, delta) - huber_cost(e - h, delta)) / (2.0 * h);
            assert!((num - 2.0 * e * huber_weight(e, delta)).abs() < 1e-6);
        }
    }

    #[test]
    fn reprojection_zero_at_exact_pixel() {
        let k = CameraIntrinsics::default();
        let pose = se3_exp(&Vec6::new(0.1, -0.2, 0.05, 0.3, 0.1, 0.2));
        let x = pose.inverse().transform(&Vec3::new(0.2, -0.1, 3.0));
        let px = project(&k, &pose, &x).unwrap();
        let (r, _, _) = reprojection_residual(&px, &pose, &x, &k).unwrap();
        assert!(r.norm() < 1e-10);
        let (r, _, _) = reprojection_residual(&px, &pose.with_scaled_translation(3.0), &(x * 3.0), &k).unwrap();
        assert!(r.norm() < 1e-9);
        assert!(reprojection_residual(&px, &pose, &(pose.inverse().transform(&Vec3::new(0.0, 0.0, -1.0))), &k).is_none());
    }

    #[test]
    fn ray_examples() {
        let ray = PluckerRay::through(&Vec3::new(1.0, 0.0, 0.0), &Vec3::z());
        assert_eq!(ray_distance_residual(&ray, &Vec3::new(1.0, 0.0, 3.0)).0, 0.0);
        assert_eq!(ray_distance_residual(&ray, &Vec3::new(1.0, 0.0, 3.0)).1, RowVector3::zeros());
        assert!((ray_distance_residual(&ray, &Vec3::new(2.0, 0.0, 6.0)).0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn depth_examples() {
        let pose = Pose::identity();
        let (r, _, _) = depth_prior_residual(2.0f64.ln(), &pose, &Vec3::new(0.1, 0.2, 2.0)).unwrap();
        assert!(r.abs() < 1e-15);
        let (r, _, _) = depth_prior_residual(1.0f64.ln(), &pose, &Vec3::new(0.1, 0.2, 2.0)).unwrap();
        assert!((r - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(depth_prior_residual(0.0, &pose, &Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn variable_anchor_matches_fixed_at_creation() {
        let k = CameraIntrinsics::default();
        let pose = se3_exp(&Vec6::new(0.2, 0.1, -0.3, 1.0, -0.5, 0.4));
        let px = Vec2::new(250.0, 310.0);
        let ray = plucker_from_camera(&pose, &px, &k);
        let x = Vec3::new(0.3, 1.0, 2.0);
        let (fixed, _) = ray_residual_vector(&ray, &x);
        let (var, _, _) = ray_residual_anchored_to_pose(&pose, &px, &k, &x);
        assert!((fixed - var).norm() < 1e-12);
    }

    #[test]
    fn zero_information_contributes_nothing() {
        let f = Factor::reprojection(0, 0, Vec2::new(10.0, 10.0), 0.0, 1.0);
        assert!(f.is_valid());
        let f = Factor::reprojection(0, 0, Vec2::new(10.0, 10.0), -1.0, 1.0);
        assert!(!f.is_valid());
    }
}
