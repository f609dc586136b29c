//! Sensitivity of the cost to a global similarity scaling.
//!
//! Scaling every free camera centre and landmark about the gauge camera
//! centre `c` by `1 + eps` moves pose `i` along the left twist
//! `(0, t_i + R_i c)` and landmark `j` along `X_j - c`. Reprojection
//! residuals are invariant along this direction; metric factors are not.

use nalgebra::DVector;

use super::FactorGraph;
use crate::factors::{huber_weight, FactorKind};
use crate::geometry::{Pose, Vec3, Vec6};

/// Scale direction restricted to the free variables (zeros elsewhere).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDirection {
    pub poses: Vec<Vec6>,
    pub landmarks: Vec<Vec3>,
}

impl ScaleDirection {
    pub fn norm(&self) -> f64 {
        let p: f64 = self.poses.iter().map(|v| v.norm_squared()).sum();
        let l: f64 = self.landmarks.iter().map(|v| v.norm_squared()).sum();
        (p + l).sqrt()
    }
}

pub fn scale_direction(graph: &FactorGraph) -> ScaleDirection {
    let c = graph.poses[graph.gauge].pose.camera_center();
    let poses = graph
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if graph.pose_is_free(i) {
                let v = p.pose.translation + p.pose.rotation * c;
                Vec6::new(0.0, 0.0, 0.0, v.x, v.y, v.z)
            } else {
                Vec6::zeros()
            }
        })
        .collect();
    let landmarks = graph
        .landmarks
        .iter()
        .map(|l| if l.fixed { Vec3::zeros() } else { l.position - c })
        .collect();
    ScaleDirection { poses, landmarks }
}

/// Per-family derivative and curvature along the scale direction, i.e. with
/// respect to the scaling factor `s` at `s = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyScaleTerms {
    pub kind: FactorKind,
    pub n_factors: usize,
    /// Directional derivative of the robust cost.
    pub derivative: f64,
    /// `v^T H v` with the Gauss–Newton Hessian `sum info * w * J^T J`.
    pub curvature: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDirectionReport {
    pub families: Vec<FamilyScaleTerms>,
    /// Trace of the full Gauss–Newton Hessian over the free variables,
    /// divided by their count.
    pub hessian_trace_per_dim: f64,
    pub free_dimension: usize,
    pub direction_norm: f64,
    /// Norm of the full cost gradient over the free variables.
    pub gradient_norm: f64,
}

impl ScaleDirectionReport {
    pub fn family(&self, kind: FactorKind) -> Option<&FamilyScaleTerms> {
        self.families.iter().find(|f| f.kind == kind)
    }

    /// Curvature of `kind` relative to the mean Hessian diagonal.
    pub fn relative_curvature(&self, kind: FactorKind) -> f64 {
        self.family(kind).map_or(0.0, |f| f.curvature / self.hessian_trace_per_dim)
    }
}

const KINDS: [FactorKind; 4] = [
    FactorKind::Reprojection,
    FactorKind::RayDistance,
    FactorKind::DepthPrior,
    FactorKind::RelativePose,
];

/// Derivative and curvature of each factor family along the scale
/// direction at the current graph state.
pub fn scale_direction_derivative(graph: &FactorGraph) -> ScaleDirectionReport {
    let dir = scale_direction(graph);
    let mut families: Vec<FamilyScaleTerms> = KINDS
        .iter()
        .map(|&kind| FamilyScaleTerms {
            kind,
            n_factors: 0,
            derivative: 0.0,
            curvature: 0.0,
        })
        .collect();
    let mut trace = 0.0;
    let mut grad_poses = vec![Vec6::zeros(); graph.poses.len()];
    let mut grad_lms = vec![Vec3::zeros(); graph.landmarks.len()];
    let mut poses: Vec<Pose> = Vec::with_capacity(2);
    for f in &graph.factors {
        poses.clear();
        poses.extend(f.pose_ids.iter().map(|&p| graph.poses[p].pose));
        let lm = f.landmark_id.map(|l| graph.landmarks[l].position);
        let lin = f.linearize(&poses, lm.as_ref(), &graph.intrinsics);
        let fam = families.iter_mut().find(|t| t.kind == f.kind()).expect("all kinds listed");
        fam.n_factors += 1;
        if !lin.active {
            continue;
        }
        let s = f.information * huber_weight(lin.residual.norm(), f.robust_delta);
        let mut jv = DVector::zeros(lin.residual.len());
        for (slot, &p) in f.pose_ids.iter().enumerate() {
            if let Some(j) = &lin.jac_poses[slot] {
                if graph.pose_is_free(p) {
                    jv += j * dir.poses[p];
                    trace += s * j.norm_squared();
                    let g = j.transpose() * &lin.residual * (2.0 * s);
                    grad_poses[p] += Vec6::from_column_slice(g.as_slice());
                }
            }
        }
        if let (Some(l), Some(j)) = (f.landmark_id, &lin.jac_landmark) {
            if !graph.landmarks[l].fixed {
                jv += j * dir.landmarks[l];
                trace += s * j.norm_squared();
                let g = j.transpose() * &lin.residual * (2.0 * s);
                grad_lms[l] += Vec3::from_column_slice(g.as_slice());
            }
        }
        fam.derivative += 2.0 * s * lin.residual.dot(&jv);
        fam.curvature += s * jv.norm_squared();
    }
    let free_dimension = 6 * (0..graph.poses.len()).filter(|&i| graph.pose_is_free(i)).count()
        + 3 * graph.landmarks.iter().filter(|l| !l.fixed).count();
    ScaleDirectionReport {
        families,
        hessian_trace_per_dim: if free_dimension > 0 { trace / free_dimension as f64 } else { 0.0 },
        free_dimension,
        direction_norm: dir.norm(),
        gradient_norm: (grad_poses.iter().map(|g| g.norm_squared()).sum::<f64>()
            + grad_lms.iter().map(|g| g.norm_squared()).sum::<f64>())
        .sqrt(),
    }
}

/// Cost of the factors of `kinds` after scaling the free variables by `s`
/// about the gauge camera centre. Used as a finite-difference oracle.
pub fn cost_along_scale(graph: &FactorGraph, kinds: &[FactorKind], s: f64) -> f64 {
    let mut g = graph.clone();
    let c = g.poses[g.gauge].pose.camera_center();
    for i in 0..g.poses.len() {
        if graph.pose_is_free(i) {
            let p = &mut g.poses[i].pose;
            let center = c + (p.camera_center() - c) * s;
            p.translation = -(p.rotation * center);
        }
    }
    for l in g.landmarks.iter_mut().filter(|l| !l.fixed) {
        l.position = c + (l.position - c) * s;
    }
    g.cost_of(g.factor_ids_of_kind(kinds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::Factor;
    use crate::geometry::{plucker_from_camera, project, CameraIntrinsics};
    use nalgebra::UnitQuaternion;

    fn graph(with_ray: bool) -> FactorGraph {
        let k = CameraIntrinsics::default();
        let mut g = FactorGraph::new(k);
        let poses: Vec<Pose> = (0..3)
            .map(|i| {
                Pose::from_center(
                    UnitQuaternion::from_euler_angles(0.02 * i as f64, -0.04 * i as f64, 0.0),
                    Vec3::new(0.4 * i as f64 + 0.3, -0.1 * i as f64, 0.2),
                )
            })
            .collect();
        for p in &poses {
            g.add_pose(*p, false);
        }
        for j in 0..20 {
            let a = j as f64;
            g.add_landmark(j, Vec3::new((a * 0.9).sin(), (a * 0.4).cos() * 0.8, 3.5 + (a * 0.3).cos()));
        }
        for (i, p) in poses.iter().enumerate() {
            for j in 0..20 {
                let x = g.landmarks[j].position;
                let px = project(&k, p, &x).unwrap();
                g.add_factor(Factor::reprojection(i, j, px, 1.0, 100.0));
                if with_ray {
                    // rays anchored at a 5% larger scene
                    let anchored = Pose::from_center(p.rotation.inverse(), p.camera_center() * 1.05);
                    g.add_factor(Factor::ray(i, j, plucker_from_camera(&anchored, &px, &k), px, 400.0, 1.0));
                }
            }
        }
        g
    }

    #[test]
    fn reprojection_is_flat_along_scale() {
        let g = graph(false);
        let r = scale_direction_derivative(&g);
        assert!(r.family(FactorKind::Reprojection).unwrap().curvature < 1e-8 * r.hessian_trace_per_dim);
        assert!(r.family(FactorKind::Reprojection).unwrap().derivative.abs() < 1e-9);
    }

    #[test]
    fn ray_derivative_matches_finite_difference() {
        let g = graph(true);
        let r = scale_direction_derivative(&g);
        let ray = r.family(FactorKind::RayDistance).unwrap();
        assert!(ray.curvature > 1e-4 * r.hessian_trace_per_dim);
        let h = 1e-6;
        let kinds = [FactorKind::RayDistance];
        let fd = (cost_along_scale(&g, &kinds, 1.0 + h) - cost_along_scale(&g, &kinds, 1.0 - h)) / (2.0 * h);
        let analytic = ray.derivative;
        assert!((fd - analytic).abs() < 1e-5 * analytic.abs().max(1.0), "{fd} vs {analytic}");
        // ray cost pulls the scene towards the larger anchors
        assert!(analytic < 0.0);
    }
}
