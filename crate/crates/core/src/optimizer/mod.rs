//! Factor graph and its Levenberg–Marquardt solver.
//!
//! Landmarks are eliminated with a Schur complement and the reduced pose
//! system is factorized with a dense Cholesky.

mod dump;
mod lm;
mod observability;

pub use dump::{read_graph, write_graph};
pub use lm::{solve, solve_subset, window_ba, SolveOptions, SolveReport, TrialStep, WindowOptions};
pub use observability::{
    cost_along_scale, scale_direction, scale_direction_derivative, FamilyScaleTerms, ScaleDirection, ScaleDirectionReport,
};

use crate::error::{Error, Result};
use crate::factors::{huber_cost, Factor, FactorKind, LinearizationSink};
use crate::geometry::{plucker_from_camera, CameraIntrinsics, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseVar {
    pub pose: Pose,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkVar {
    /// External identifier, not used by the solver.
    pub id: u64,
    pub position: Vec3,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<PoseVar>,
    pub landmarks: Vec<LandmarkVar>,
    pub factors: Vec<Factor>,
    /// Pose held fixed to remove the rigid gauge freedom.
    pub gauge: usize,
}

impl FactorGraph {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            poses: Vec::new(),
            landmarks: Vec::new(),
            factors: Vec::new(),
            gauge: 0,
        }
    }

    pub fn add_pose(&mut self, pose: Pose, fixed: bool) -> usize {
        self.poses.push(PoseVar { pose, fixed });
        self.poses.len() - 1
    }

    pub fn add_landmark(&mut self, id: u64, position: Vec3) -> usize {
        self.landmarks.push(LandmarkVar {
            id,
            position,
            fixed: false,
        });
        self.landmarks.len() - 1
    }

    pub fn add_factor(&mut self, factor: Factor) -> usize {
        self.factors.push(factor);
        self.factors.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.poses.is_empty() {
            return Err(Error::InvalidInput("graph has no poses".into()));
        }
        if self.gauge >= self.poses.len() {
            return Err(Error::InvalidInput(format!("gauge pose {} does not exist", self.gauge)));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if !f.is_valid() {
                return Err(Error::InvalidInput(format!("factor {i} is malformed: {f:?}")));
            }
            if f.pose_ids.iter().any(|&p| p >= self.poses.len()) {
                return Err(Error::InvalidInput(format!("factor {i} references a missing pose")));
            }
            if f.landmark_id.is_some_and(|l| l >= self.landmarks.len()) {
                return Err(Error::InvalidInput(format!("factor {i} references a missing landmark")));
            }
        }
        Ok(())
    }

    /// Pose is a variable in a solve over the whole graph.
    pub fn pose_is_free(&self, i: usize) -> bool {
        i != self.gauge && !self.poses[i].fixed
    }

    pub fn factor_cost(&self, f: &Factor) -> Option<f64> {
        let mut poses = [Pose::identity(); 2];
        for (slot, &p) in poses.iter_mut().zip(&f.pose_ids) {
            *slot = self.poses[p].pose;
        }
        let lm = f.landmark_id.map(|l| self.landmarks[l].position);
        let mut sink = NormSink(None);
        f.linearize_into(&poses[..f.pose_ids.len()], lm.as_ref(), &self.intrinsics, &mut sink);
        sink.0.map(|n| f.information * huber_cost(n, f.robust_delta))
    }

    /// Robust cost of the given factors; inactive factors contribute zero.
    pub fn cost_of(&self, factor_ids: impl IntoIterator<Item = usize>) -> f64 {
        factor_ids
            .into_iter()
            .filter_map(|i| self.factor_cost(&self.factors[i]))
            .sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.cost_of(0..self.factors.len())
    }

    pub fn factor_ids_of_kind(&self, kinds: &[FactorKind]) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&i| kinds.contains(&self.factors[i].kind()))
            .collect()
    }

    pub fn count_kind(&self, kind: FactorKind) -> usize {
        self.factors.iter().filter(|f| f.kind() == kind).count()
    }

    /// Multiplies all translations and landmark positions by `s` about the
    /// gauge camera centre.
    pub fn scale_about_gauge(&mut self, s: f64) {
        let c = self.poses[self.gauge].pose.camera_center();
        for p in &mut self.poses {
            let center = p.pose.camera_center();
            let new_center = c + (center - c) * s;
            p.pose.translation = -(p.pose.rotation * new_center);
        }
        for l in &mut self.landmarks {
            l.position = c + (l.position - c) * s;
        }
    }

    /// Rebuilds the rays of fixed-anchor ray factors on the listed poses
    /// from the current pose values, moving each anchor centre by
    /// `scale_correction` about `center`.
    pub fn reanchor_rays(&mut self, pose_ids: &[usize], scale_correction: f64, center: &Vec3) {
        use crate::factors::{Measurement, RayAnchor};
        let k = self.intrinsics;
        for f in &mut self.factors {
            let Measurement::Ray {
                ray,
                pixel,
                anchor: RayAnchor::Fixed,
            } = &mut f.measurement
            else {
                continue;
            };
            let pid = f.pose_ids[0];
            if !pose_ids.contains(&pid) {
                continue;
            }
            let pose = self.poses[pid].pose;
            let anchored = Pose::from_center(
                pose.rotation.inverse(),
                center + (pose.camera_center() - center) * scale_correction,
            );
            *ray = plucker_from_camera(&anchored, pixel, &k);
        }
    }
}

/// Keeps only the residual norm of an active factor.
struct NormSink(Option<f64>);

impl LinearizationSink for NormSink {
    fn accept<const R: usize>(
        &mut self,
        residual: &nalgebra::SVector<f64, R>,
        _: [Option<&nalgebra::SMatrix<f64, R, 6>>; 2],
        _: Option<&nalgebra::SMatrix<f64, R, 3>>,
    ) {
        self.0 = Some(residual.norm());
    }
}
