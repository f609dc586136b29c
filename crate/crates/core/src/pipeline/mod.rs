//! End-to-end estimator: metric initialization, per-keyframe tracking with
//! uncertainty gating and scale filtering, sliding-window bundle
//! adjustment, and gated point-cloud fusion.
//!
//! The map is kept in metric units. The scale filter tracks the ratio
//! between prior depths and map depths expressed in the raw units of the
//! initial reconstruction (`map_unit` converts between the two), so the
//! correction `exp(log_mean) / map_unit` applied to new landmarks and ray
//! anchors tends to one while the map agrees with the priors.

pub mod frontend;
mod fusion;
mod init;

pub use fusion::{fuse_point_cloud, ColoredPoint};
pub use init::metric_init;

use std::collections::{BTreeMap, HashMap};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{Factor, FactorKind};
use crate::gating::{fuse_uncertainty, gate, spatial_uncertainty, temporal_uncertainty, GateField, GateParams};
use crate::geometry::{plucker_from_camera, CameraIntrinsics, Pose, Vec2, Vec3, Z_MIN};
use crate::optimizer::{window_ba, FactorGraph, SolveOptions, WindowOptions};
use crate::scale::{kalman_predict, kalman_update, wls_log_scale, ScaleBelief, ScaleObservation};
use crate::sim::{FrameObservation, Track};

use frontend::{refine_pose, reprojection_rms, triangulate, Correspondence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_init: usize,
    pub window_w: usize,
    pub ba_iterations: usize,
    pub gate: GateParams,
    pub process_noise_q: f64,
    /// Huber threshold of the ray factor, metres.
    pub huber_ray: f64,
    /// Huber threshold of the depth factor, log units.
    pub huber_depth: f64,
    pub parallax_min_deg: f64,
    pub fuse_weight_min: f64,
    /// Run every stage in one sequential loop. The implementation is
    /// single-threaded, so this only records the intent in run reports.
    pub deterministic: bool,
    pub min_tracks: usize,
    /// Priors for keyframe `k` become available at keyframe `k + latency`.
    pub prior_latency: usize,
    /// Pixel noise assumed by the reprojection factors.
    pub pixel_sigma: f64,
    pub huber_pixel: f64,
    /// Scale reprojection information by the gate weight as well.
    pub gate_reprojection: bool,
    /// Include depth-prior factors in the sliding window (always used in
    /// the global solve).
    pub window_depth_factors: bool,
    /// Let keyframes older than the window constrain its landmarks. When
    /// off, the window is self-contained with its oldest pose fixed, like
    /// a marginalizing visual-odometry front end.
    pub window_outside_observations: bool,
    pub min_triangulation_angle_deg: f64,
    pub max_triangulation_error_px: f64,
    /// Log-scale step applied to the window along its similarity null
    /// direction before each window solve, emulating the scale drift of a
    /// monocular front end.
    pub frontend_scale_drift: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_init: 5,
            window_w: 12,
            ba_iterations: 15,
            gate: GateParams::default(),
            process_noise_q: 1e-4,
            huber_ray: 0.05,
            huber_depth: 0.1,
            parallax_min_deg: 1.0,
            fuse_weight_min: 0.5,
            deterministic: true,
            min_tracks: 12,
            prior_latency: 0,
            pixel_sigma: 0.5,
            huber_pixel: 2.0,
            gate_reprojection: true,
            window_depth_factors: false,
            window_outside_observations: true,
            min_triangulation_angle_deg: 1.0,
            max_triangulation_error_px: 2.0,
            frontend_scale_drift: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        let positive = [
            ("process_noise_q", self.process_noise_q, true),
            ("huber_ray", self.huber_ray, false),
            ("huber_depth", self.huber_depth, false),
            ("parallax_min_deg", self.parallax_min_deg, false),
            ("pixel_sigma", self.pixel_sigma, false),
            ("huber_pixel", self.huber_pixel, false),
            ("min_triangulation_angle_deg", self.min_triangulation_angle_deg, true),
            ("max_triangulation_error_px", self.max_triangulation_error_px, false),
            ("fuse_weight_min", self.fuse_weight_min, true),
        ];
        for (name, v, zero_ok) in positive {
            let ok = if zero_ok { v >= 0.0 } else { v > 0.0 };
            if !ok || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be {}, got {v}", if zero_ok { ">= 0" } else { "> 0" })));
            }
        }
        if self.n_init < 2 || self.window_w < 2 || self.ba_iterations == 0 || self.min_tracks < 6 {
            return Err(Error::InvalidInput(
                "need n_init >= 2, window_w >= 2, ba_iterations >= 1, min_tracks >= 6".into(),
            ));
        }
        if !self.frontend_scale_drift.is_finite() {
            return Err(Error::InvalidInput("drift injection must be finite".into()));
        }
        Ok(())
    }
}

/// Relative cost decrease below which a window solve stops early.
const WINDOW_REL_TOL: f64 = 1e-6;

/// Components that can be switched off for ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// No point-to-ray factors.
    pub no_ray_factor: bool,
    /// Every track gets weight one.
    pub no_dsug: bool,
    /// The per-keyframe estimate replaces the filtered belief.
    pub no_kalman: bool,
    /// Uniform weights in the per-keyframe log-scale estimate.
    pub no_wls: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["no_ray_factor", "no_dsug", "no_kalman", "no_wls"];

    pub fn set(&mut self, flag: &str) -> Result<()> {
        match flag {
            "no_ray_factor" => self.no_ray_factor = true,
            "no_dsug" => self.no_dsug = true,
            "no_kalman" => self.no_kalman = true,
            "no_wls" => self.no_wls = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation flag '{other}', expected one of {}",
                    Self::FLAGS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self> {
        let mut a = Self::default();
        for f in flags {
            a.set(f.as_ref().trim())?;
        }
        Ok(a)
    }

    pub fn active_flags(&self) -> Vec<&'static str> {
        let on = [self.no_ray_factor, self.no_dsug, self.no_kalman, self.no_wls];
        Self::FLAGS.iter().zip(on).filter(|(_, b)| *b).map(|(f, _)| *f).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Initializing,
    Tracking,
}

/// Everything the pipeline keeps about one keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeRecord {
    pub keyframe_id: usize,
    pub tracks: Vec<Track>,
    pub descriptor: DVector<f64>,
    /// Map landmark of each track, once triangulated.
    pub map_points: Vec<Option<usize>>,
    /// Set once the priors of this keyframe have been processed.
    pub gate: Option<GateField>,
    pub wls: Option<ScaleObservation>,
    /// Belief after this keyframe's priors were processed.
    pub scale: ScaleBelief,
    reprojection_factor: Vec<Option<usize>>,
    metric_added: Vec<bool>,
}

impl KeyframeRecord {
    fn new(obs: &FrameObservation, scale: ScaleBelief) -> Self {
        let n = obs.tracks.len();
        Self {
            keyframe_id: obs.keyframe_id,
            tracks: obs.tracks.clone(),
            descriptor: obs.descriptor.clone(),
            map_points: vec![None; n],
            gate: None,
            wls: None,
            scale,
            reprojection_factor: vec![None; n],
            metric_added: vec![false; n],
        }
    }
}

/// Contiguous run of keyframes observing one landmark id.
#[derive(Debug, Clone, PartialEq)]
struct Segment {
    map_point: Option<usize>,
    /// `(keyframe, track index)` pairs.
    obs: Vec<(usize, usize)>,
}

/// How often each switchable code path ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PathCounters {
    pub ray_factors: usize,
    pub gated_keyframes: usize,
    pub kalman_updates: usize,
    pub weighted_estimates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub config: PipelineConfig,
    pub ablation: Ablation,
    pub graph: FactorGraph,
    pub scale: ScaleBelief,
    /// Metric length of one raw unit of the initial reconstruction, as
    /// estimated at initialization.
    pub map_unit: f64,
    pub keyframes: Vec<KeyframeRecord>,
    pub mode: Mode,
    /// Keyframes consumed by initialization.
    pub init_window: usize,
    pub paths: PathCounters,
    segments: BTreeMap<u64, Segment>,
    priors_done: usize,
}

impl PipelineState {
    /// Factor by which the map currently disagrees with the priors.
    pub fn scale_correction(&self) -> f64 {
        self.scale.scale() / self.map_unit
    }

    pub fn estimated_poses(&self) -> Vec<Pose> {
        self.graph.poses.iter().map(|p| p.pose).collect()
    }

    pub fn descriptors(&self) -> Vec<DVector<f64>> {
        self.keyframes.iter().map(|k| k.descriptor.clone()).collect()
    }

    /// Published scale `exp(log_mean)` after each keyframe.
    pub fn scale_history(&self) -> Vec<f64> {
        self.keyframes.iter().map(|k| k.scale.scale()).collect()
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        self.graph.intrinsics
    }

    fn pose(&self, kf: usize) -> Pose {
        self.graph.poses[kf].pose
    }

    fn reprojection_information(&self, w: Option<f64>) -> f64 {
        let base = 1.0 / (self.config.pixel_sigma * self.config.pixel_sigma);
        match w {
            Some(w) if self.config.gate_reprojection && !self.ablation.no_dsug => base * w,
            _ => base,
        }
    }

    /// Gate of keyframe `j` against its predecessor.
    fn compute_gate(&mut self, j: usize, spatial_only: bool) -> Result<GateField> {
        let rec = &self.keyframes[j];
        let params = &self.config.gate;
        let n = rec.tracks.len();
        if self.ablation.no_dsug {
            return Ok(GateField::ungated(n, params));
        }
        self.paths.gated_keyframes += 1;
        let u_s: Vec<f64> = rec.tracks.iter().map(|t| spatial_uncertainty(t.spatial_confidence)).collect();
        let mut u_t = vec![params.tau; n];
        if j > 0 && !spatial_only {
            let prev = &self.keyframes[j - 1];
            let index: HashMap<u64, usize> =
                prev.tracks.iter().enumerate().map(|(i, t)| (t.landmark_id, i)).collect();
            let mut rel = self.pose(j).compose(&self.pose(j - 1).inverse());
            rel.translation *= self.scale_correction();
            let pairs: Vec<(usize, usize)> = rec
                .tracks
                .iter()
                .enumerate()
                .filter_map(|(i, t)| index.get(&t.landmark_id).map(|&p| (i, p)))
                .collect();
            let pixels: Vec<Vec2> = pairs.iter().map(|&(_, p)| prev.tracks[p].pixel).collect();
            let d_i: Vec<f64> = pairs.iter().map(|&(_, p)| prev.tracks[p].prior_depth).collect();
            let d_j: Vec<f64> = pairs.iter().map(|&(i, _)| rec.tracks[i].prior_depth).collect();
            let u = temporal_uncertainty(&pixels, &d_i, &d_j, &rel, &self.intrinsics())?;
            for (&(i, _), ui) in pairs.iter().zip(u) {
                u_t[i] = ui;
            }
        }
        let u = fuse_uncertainty(&u_s, &u_t, params)?;
        Ok(gate(&u, params))
    }

    /// Map depths (divided by `unit`), prior depths and precisions of the
    /// triangulated tracks of keyframe `j`.
    fn scale_samples(&self, j: usize, field: &GateField, unit: f64) -> [Vec<f64>; 3] {
        let rec = &self.keyframes[j];
        let pose = self.pose(j);
        let uniform = 1.0 / self.config.gate.sigma0_sq;
        let mut out: [Vec<f64>; 3] = Default::default();
        for (i, t) in rec.tracks.iter().enumerate() {
            let Some(l) = rec.map_points[i] else { continue };
            let z = pose.transform(&self.graph.landmarks[l].position).z;
            if z <= Z_MIN || !(t.prior_depth > 0.0) {
                continue;
            }
            out[0].push(z / unit);
            out[1].push(t.prior_depth);
            out[2].push(if self.ablation.no_wls { uniform } else { field.omega[i] });
        }
        out
    }

    /// Per-keyframe log-scale observation in raw units.
    fn observe_scale(&mut self, j: usize, field: &GateField) -> Result<ScaleObservation> {
        let [d, p, w] = self.scale_samples(j, field, self.map_unit);
        if !self.ablation.no_wls {
            self.paths.weighted_estimates += 1;
        }
        wls_log_scale(&d, &p, &w)
    }

    /// Processes the depth priors of keyframe `j`: gate, scale update and
    /// the metric factors of its tracks.
    fn process_priors(&mut self, j: usize) -> Result<()> {
        let field = self.compute_gate(j, false)?;
        let predicted = kalman_predict(&self.scale, self.config.process_noise_q);
        let obs = match self.observe_scale(j, &field) {
            Ok(o) => Some(o),
            Err(Error::NoInformation) => None,
            Err(e) => return Err(e),
        };
        let mut belief = match obs {
            Some(o) if self.ablation.no_kalman => ScaleBelief::new(o.log_scale, o.variance, j),
            Some(o) => {
                self.paths.kalman_updates += 1;
                kalman_update(&predicted, &o)
            }
            None => predicted,
        };
        belief.keyframe_id = j;
        self.scale = belief;
        self.keyframes[j].wls = obs;
        self.keyframes[j].scale = belief;
        for i in 0..self.keyframes[j].tracks.len() {
            if let Some(f) = self.keyframes[j].reprojection_factor[i] {
                let info = self.reprojection_information(Some(field.w[i]));
                self.graph.factors[f].information = info;
            }
        }
        self.keyframes[j].gate = Some(field);
        self.priors_done = j + 1;
        for i in 0..self.keyframes[j].tracks.len() {
            self.add_metric_factors(j, i);
        }
        Ok(())
    }

    /// Centre about which ray anchors are corrected for keyframe `kf`.
    fn anchor_center(&self, kf: usize) -> Vec3 {
        let first = (kf + 1).saturating_sub(self.config.window_w);
        self.pose(first).camera_center()
    }

    fn add_metric_factors(&mut self, kf: usize, ti: usize) {
        let rec = &self.keyframes[kf];
        if rec.metric_added[ti] {
            return;
        }
        let (Some(l), Some(field)) = (rec.map_points[ti], rec.gate.as_ref()) else {
            return;
        };
        let omega = field.omega[ti];
        let track = rec.tracks[ti];
        self.keyframes[kf].metric_added[ti] = true;
        if omega <= 0.0 {
            return;
        }
        if !self.ablation.no_ray_factor {
            let pose = self.pose(kf);
            let c = self.anchor_center(kf);
            let r = self.scale_correction();
            let anchored = Pose::from_center(pose.rotation.inverse(), c + (pose.camera_center() - c) * r);
            let ray = plucker_from_camera(&anchored, &track.pixel, &self.intrinsics());
            self.graph
                .add_factor(Factor::ray(kf, l, ray, track.pixel, omega, self.config.huber_ray));
            self.paths.ray_factors += 1;
        }
        self.graph
            .add_factor(Factor::depth_prior(kf, l, track.prior_depth, omega, self.config.huber_depth));
    }

    fn attach_observation(&mut self, kf: usize, ti: usize, l: usize) {
        let w = self.keyframes[kf].gate.as_ref().map(|g| g.w[ti]);
        let info = self.reprojection_information(w);
        let px = self.keyframes[kf].tracks[ti].pixel;
        let f = self
            .graph
            .add_factor(Factor::reprojection(kf, l, px, info, self.config.huber_pixel));
        let rec = &mut self.keyframes[kf];
        rec.map_points[ti] = Some(l);
        rec.reprojection_factor[ti] = Some(f);
        self.add_metric_factors(kf, ti);
    }

    /// Extends the visibility segments with keyframe `kf` and drops
    /// segments that were not continued.
    fn update_segments(&mut self, kf: usize) {
        let ids: Vec<(usize, u64)> = self.keyframes[kf]
            .tracks
            .iter()
            .enumerate()
            .map(|(i, t)| (i, t.landmark_id))
            .collect();
        let mut next = BTreeMap::new();
        for (i, id) in ids {
            let seg = match self.segments.remove(&id) {
                Some(mut s) if s.obs.last().is_some_and(|&(k, _)| k + 1 == kf) => {
                    s.obs.push((kf, i));
                    s
                }
                _ => Segment {
                    map_point: None,
                    obs: vec![(kf, i)],
                },
            };
            next.insert(id, seg);
        }
        self.segments = next;
    }

    /// Triangulates segments without a landmark that now have enough
    /// parallax, applying the scale feedback.
    fn triangulate_new(&mut self, kf: usize) {
        let k = self.intrinsics();
        let r = self.scale_correction();
        let center = self.pose(kf).camera_center();
        let ids: Vec<u64> = self
            .segments
            .iter()
            .filter(|(_, s)| s.map_point.is_none() && s.obs.len() >= 2)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            let obs = self.segments[&id].obs.clone();
            let views: Vec<(Pose, Vec2)> = obs
                .iter()
                .map(|&(f, i)| (self.pose(f), self.keyframes[f].tracks[i].pixel))
                .collect();
            let bearing = |(pose, px): &(Pose, Vec2)| pose.rotation.inverse() * k.unproject(px).normalize();
            let angle = bearing(&views[0]).angle(&bearing(&views[views.len() - 1]));
            if angle.to_degrees() < self.config.min_triangulation_angle_deg {
                continue;
            }
            let Some(x) = triangulate(&views, &k) else { continue };
            if reprojection_rms(&x, &views, &k) > self.config.max_triangulation_error_px {
                continue;
            }
            let x = center + (x - center) * r;
            if views.iter().any(|(p, _)| p.transform(&x).z <= Z_MIN) {
                continue;
            }
            let l = self.graph.add_landmark(id, x);
            self.segments.get_mut(&id).expect("listed above").map_point = Some(l);
            for (f, i) in obs {
                self.attach_observation(f, i, l);
            }
        }
    }

    /// Tracks one new keyframe.
    pub fn process_keyframe(&mut self, obs: &FrameObservation) -> Result<()> {
        if self.mode != Mode::Tracking {
            return Err(Error::Precondition("process_keyframe before initialization".into()));
        }
        let kf = self.keyframes.len();
        if obs.keyframe_id != kf {
            return Err(Error::Precondition(format!(
                "expected keyframe {kf}, got {}",
                obs.keyframe_id
            )));
        }
        let k = self.intrinsics();
        let prev = self.pose(kf - 1);
        let predicted = if kf >= 2 {
            let motion = prev.compose(&self.pose(kf - 2).inverse());
            motion.compose(&prev)
        } else {
            prev
        };
        self.keyframes.push(KeyframeRecord::new(obs, self.scale));
        self.graph.add_pose(predicted, false);
        self.update_segments(kf);

        // associate with landmarks continued from the previous keyframe
        let prev_weights: HashMap<u64, f64> = self.keyframes[kf - 1]
            .gate
            .as_ref()
            .map(|g| {
                self.keyframes[kf - 1]
                    .tracks
                    .iter()
                    .zip(&g.w)
                    .map(|(t, w)| (t.landmark_id, *w))
                    .collect()
            })
            .unwrap_or_default();
        let mut matched: Vec<(usize, usize)> = Vec::new();
        for (i, t) in self.keyframes[kf].tracks.iter().enumerate() {
            if let Some(l) = self.segments.get(&t.landmark_id).and_then(|s| s.map_point) {
                matched.push((i, l));
            }
        }
        if matched.len() < self.config.min_tracks {
            return Err(Error::TrackingLost {
                keyframe: kf,
                tracks: matched.len(),
                required: self.config.min_tracks,
            });
        }
        let corr = |state: &Self, weight: &dyn Fn(usize, u64) -> Option<f64>| -> Vec<Correspondence> {
            matched
                .iter()
                .map(|&(i, l)| {
                    let t = &state.keyframes[kf].tracks[i];
                    Correspondence {
                        point: state.graph.landmarks[l].position,
                        pixel: t.pixel,
                        information: state.reprojection_information(weight(i, t.landmark_id)),
                    }
                })
                .collect()
        };
        let c = corr(self, &|_, id| prev_weights.get(&id).copied());
        let (pose, _) = refine_pose(&predicted, &c, &k, self.config.huber_pixel, 20)?;
        self.graph.poses[kf].pose = pose;
        for &(i, l) in &matched {
            self.attach_observation(kf, i, l);
        }

        // priors that have arrived by now
        let mut refined = false;
        while self.priors_done + self.config.prior_latency <= kf {
            let j = self.priors_done;
            self.process_priors(j)?;
            if j == kf {
                refined = true;
            }
        }
        if refined {
            let field = self.keyframes[kf].gate.clone().expect("just processed");
            let survivors = matched.iter().filter(|&&(i, _)| field.w[i] >= 0.5).count();
            if survivors < self.config.min_tracks {
                return Err(Error::TrackingLost {
                    keyframe: kf,
                    tracks: survivors,
                    required: self.config.min_tracks,
                });
            }
            let c = corr(self, &|i, _| Some(field.w[i]));
            let (pose, _) = refine_pose(&self.pose(kf), &c, &k, self.config.huber_pixel, 20)?;
            self.graph.poses[kf].pose = pose;
        }

        self.triangulate_new(kf);
        self.run_window(kf)?;
        self.keyframes[kf].scale = if self.keyframes[kf].gate.is_some() {
            self.keyframes[kf].scale
        } else {
            self.scale
        };
        Ok(())
    }

    /// Scales the free part of the window about its first camera.
    fn inject_window_scale(&mut self, first: usize, kf: usize, s: f64) {
        let c = self.pose(first).camera_center();
        let mut touched = vec![false; self.graph.landmarks.len()];
        for f in &self.graph.factors {
            if let Some(l) = f.landmark_id {
                if f.pose_ids.iter().any(|p| (first..=kf).contains(p)) {
                    touched[l] = true;
                }
            }
        }
        for p in first + 1..=kf {
            let pose = &mut self.graph.poses[p].pose;
            let center = c + (pose.camera_center() - c) * s;
            pose.translation = -(pose.rotation * center);
        }
        for (l, lm) in self.graph.landmarks.iter_mut().enumerate() {
            if touched[l] {
                lm.position = c + (lm.position - c) * s;
            }
        }
    }

    fn run_window(&mut self, kf: usize) -> Result<()> {
        let first = (kf + 1).saturating_sub(self.config.window_w);
        if self.config.frontend_scale_drift != 0.0 {
            self.inject_window_scale(first, kf, self.config.frontend_scale_drift.exp());
        }
        let mut kinds = vec![FactorKind::Reprojection];
        if !self.ablation.no_ray_factor {
            kinds.push(FactorKind::RayDistance);
        }
        if self.config.window_depth_factors {
            kinds.push(FactorKind::DepthPrior);
        }
        let options = WindowOptions {
            window: (first..=kf).collect(),
            kinds,
            solve: SolveOptions {
                max_iterations: self.config.ba_iterations,
                rel_tol: WINDOW_REL_TOL,
                ..SolveOptions::default()
            },
            reanchor_scale: (!self.ablation.no_ray_factor).then(|| self.scale_correction()),
            outside_observations: self.config.window_outside_observations,
        };
        window_ba(&mut self.graph, &options)?;
        Ok(())
    }

    /// Processes priors still waiting because of latency.
    pub fn finish(&mut self) -> Result<()> {
        while self.priors_done < self.keyframes.len() {
            self.process_priors(self.priors_done)?;
        }
        Ok(())
    }
}

/// Initialization followed by tracking of every remaining frame.
pub fn run_pipeline(
    frames: &[FrameObservation],
    k: &CameraIntrinsics,
    config: &PipelineConfig,
    ablation: Ablation,
) -> Result<PipelineState> {
    let mut state = metric_init(frames, k, config, ablation)?;
    for obs in &frames[state.init_window..] {
        state.process_keyframe(obs)?;
    }
    state.finish()?;
    Ok(state)
}
