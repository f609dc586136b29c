//! Geometric helpers used by tracking: pose refinement against a fixed map,
//! multi-view triangulation, and rotation-compensated parallax.

use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector4};

use crate::error::Result;
use crate::factors::Factor;
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3, Z_MIN};
use crate::optimizer::{solve_subset, FactorGraph, SolveOptions, SolveReport};

/// One 2D-3D correspondence with its reprojection information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point: Vec3,
    pub pixel: Vec2,
    pub information: f64,
}

/// Refines a camera pose against fixed landmarks with robust reprojection.
pub fn refine_pose(
    initial: &Pose,
    correspondences: &[Correspondence],
    k: &CameraIntrinsics,
    huber_px: f64,
    iterations: usize,
) -> Result<(Pose, SolveReport)> {
    let mut g = FactorGraph::new(*k);
    // pose 0 is an unconnected gauge placeholder so pose 1 can move
    g.add_pose(Pose::identity(), true);
    g.add_pose(*initial, false);
    for (j, c) in correspondences.iter().enumerate() {
        let l = g.add_landmark(j as u64, c.point);
        g.landmarks[l].fixed = true;
        g.add_factor(Factor::reprojection(1, l, c.pixel, c.information, huber_px));
    }
    let factors: Vec<usize> = (0..g.factors.len()).collect();
    let opts = SolveOptions {
        max_iterations: iterations,
        ..SolveOptions::default()
    };
    let lm_free = vec![false; g.landmarks.len()];
    let report = solve_subset(&mut g, &factors, &[false, true], &lm_free, &opts)?;
    Ok((g.poses[1].pose, report))
}

/// Linear triangulation from two or more views. Returns `None` when the
/// point ends up behind any camera.
pub fn triangulate(views: &[(Pose, Vec2)], k: &CameraIntrinsics) -> Option<Vec3> {
    if views.len() < 2 {
        return None;
    }
    let rows = (2 * views.len()).max(4);
    let mut a = DMatrix::zeros(rows, 4);
    for (i, (pose, px)) in views.iter().enumerate() {
        let x = k.unproject(px);
        let r = pose.rotation_matrix();
        let t = pose.translation;
        let p = |row: usize| Vector4::new(r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row]);
        let r0 = p(2) * x.x - p(0);
        let r1 = p(2) * x.y - p(1);
        for c in 0..4 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let x = Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    views
        .iter()
        .all(|(pose, _)| pose.transform(&x).z > Z_MIN)
        .then_some(x)
}

/// RMS reprojection error in pixels of `x` over `views`.
pub fn reprojection_rms(x: &Vec3, views: &[(Pose, Vec2)], k: &CameraIntrinsics) -> f64 {
    let mut sum = 0.0;
    for (pose, px) in views {
        match k.project_camera_point(&pose.transform(x)) {
            Some(p) => sum += (p - px).norm_squared(),
            None => return f64::INFINITY,
        }
    }
    (sum / views.len() as f64).sqrt()
}

/// Rotation best aligning unit bearings `a` onto `b` (least squares).
pub fn align_bearings(a: &[Vec3], b: &[Vec3]) -> UnitQuaternion<f64> {
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += q * p.transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(u * d * v_t))
}

/// Median angle in degrees between corresponding bearings after removing
/// the best-fitting pure rotation. Near zero for rotation-only motion.
pub fn median_parallax_deg(a: &[Vec3], b: &[Vec3]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let r = align_bearings(a, b);
    let mut angles: Vec<f64> = a.iter().zip(b).map(|(p, q)| (r * p).angle(q).to_degrees()).collect();
    angles.sort_by(f64::total_cmp);
    let n = angles.len();
    if n % 2 == 1 {
        angles[n / 2]
    } else {
        0.5 * (angles[n / 2 - 1] + angles[n / 2])
    }
}
