//! Trajectory alignment, absolute trajectory error and point-cloud metrics.

use std::io::Write;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Rotation, translation and scale.
    Sim3,
    /// Rigid only; the estimate keeps its own scale.
    Se3,
}

impl AlignMode {
    pub fn name(&self) -> &'static str {
        match self {
            AlignMode::Sim3 => "sim3",
            AlignMode::Se3 => "se3",
        }
    }
}

/// `gt ~ scale * rotation * est + translation` on camera centres.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub mode: AlignMode,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
    pub ate_rmse: f64,
    pub per_frame_errors: Vec<f64>,
}

impl AlignmentResult {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// `|scale - 1|` in percent.
    pub fn scale_error_pct(&self) -> f64 {
        (self.scale - 1.0).abs() * 100.0
    }
}

/// Relative size of the second principal axis below which a trajectory
/// counts as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

/// Closed-form least-squares alignment of point sets (Umeyama).
pub fn align_points(est: &[Vec3], gt: &[Vec3], mode: AlignMode) -> Result<AlignmentResult> {
    let n = est.len();
    if n != gt.len() {
        return Err(Error::InvalidInput(format!("length mismatch: {n} vs {}", gt.len())));
    }
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 poses, got {n}")));
    }
    if est.iter().chain(gt).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::InvalidInput("non-finite position".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().sum::<Vec3>() * inv_n;
    let mu_g = gt.iter().sum::<Vec3>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut cov_e = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        cov += (g - mu_g) * de.transpose();
        cov_e += de * de.transpose();
    }
    cov *= inv_n;
    cov_e *= inv_n;
    let var_e = cov_e.trace();
    if mode == AlignMode::Sim3 {
        let mut ev: Vec<f64> = cov_e.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        if !(ev[0] > 0.0) || ev[1] <= COLLINEAR_TOL * ev[0] {
            return Err(Error::DegenerateGeometry(
                "trajectory is collinear; scale alignment is ill-posed".into(),
            ));
        }
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = match mode {
        AlignMode::Se3 => 1.0,
        AlignMode::Sim3 => {
            let s = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_e;
            if !(s > 0.0) {
                return Err(Error::DegenerateGeometry(format!("non-positive scale {s}")));
            }
            s
        }
    };
    let translation = mu_g - rotation * mu_e * scale;
    let per_frame_errors: Vec<f64> = est
        .iter()
        .zip(gt)
        .map(|(e, g)| (rotation * e * scale + translation - g).norm())
        .collect();
    let ate_rmse = (per_frame_errors.iter().map(|e| e * e).sum::<f64>() * inv_n).sqrt();
    Ok(AlignmentResult {
        mode,
        rotation,
        translation,
        scale,
        ate_rmse,
        per_frame_errors,
    })
}

/// Aligns two index-associated trajectories on their camera centres.
pub fn align(estimate: &[Pose], ground_truth: &[Pose], mode: AlignMode) -> Result<AlignmentResult> {
    let e: Vec<Vec3> = estimate.iter().map(Pose::camera_center).collect();
    let g: Vec<Vec3> = ground_truth.iter().map(Pose::camera_center).collect();
    align_points(&e, &g, mode)
}

/// Similarity alignment can only do better than rigid alignment.
pub fn ate_property_check(se3: &AlignmentResult, sim3: &AlignmentResult) -> bool {
    sim3.ate_rmse <= se3.ate_rmse + 1e-12
}

fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Symmetric Chamfer distance and F-score at threshold `tau` (a point
/// counts when its nearest neighbour is at distance `<= tau`).
pub fn chamfer_fscore(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be >= 0, got {tau}")));
    }
    let ab = nearest_distances(a, b);
    let ba = nearest_distances(b, a);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let chamfer = 0.5 * (mean(&ab) + mean(&ba));
    let frac = |v: &[f64]| v.iter().filter(|&&d| d <= tau).count() as f64 / v.len() as f64;
    let (precision, recall) = (frac(&ab), frac(&ba));
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((chamfer, fscore))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub sequence: String,
    pub mode: AlignMode,
    pub ate_rmse_m: f64,
    pub scale: f64,
    pub scale_error_pct: f64,
}

impl MetricsRow {
    pub fn new(sequence: &str, result: &AlignmentResult) -> Self {
        Self {
            sequence: sequence.to_string(),
            mode: result.mode,
            ate_rmse_m: result.ate_rmse,
            scale: result.scale,
            scale_error_pct: result.scale_error_pct(),
        }
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(out, "sequence,mode,ate_rmse_m,scale,scale_error_pct")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.4}",
            r.sequence,
            r.mode.name(),
            r.ate_rmse_m,
            r.scale,
            r.scale_error_pct
        )?;
    }
    Ok(())
}
