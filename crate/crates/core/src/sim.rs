//! Deterministic synthetic world.
//!
//! Stands in for real sequences and for the depth network: camera
//! trajectories, static and moving landmarks, noisy pixel tracks, metric
//! depth priors with a global scale, a log-space random-walk drift and
//! log-normal noise, a confidence value per track, and a global place
//! descriptor per keyframe.
//!
//! Every random quantity is drawn from its own seeded ChaCha stream so a
//! given seed reproduces the world bit for bit.

use nalgebra::{DVector, Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Landmark, Pose, Vec2, Vec3};

/// Dimension of the simulated place descriptor.
pub const DESCRIPTOR_DIM: usize = 64;

const CONF_FLOOR: f64 = 0.2;
const CONF_BASE: f64 = 0.9;
const MIN_VISIBLE_DEPTH: f64 = 0.1;
const DYNAMIC_SAMPLE_RADIUS: f64 = 0.03;
const DYNAMIC_SAMPLES_PER_OBJECT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Circle,
    Lissajous,
    LineWithReturn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_static_landmarks: usize,
    pub n_dynamic_landmarks: usize,
    pub trajectory_kind: TrajectoryKind,
    pub n_keyframes: usize,
    /// Pixels.
    pub pixel_noise_sigma: f64,
    /// Std of the per-track log-depth noise of the priors.
    pub prior_log_noise_sigma: f64,
    /// Std of the per-keyframe step of the log-scale random walk.
    pub prior_scale_walk_sigma: f64,
    /// Global factor applied to every prior depth.
    pub true_global_scale: f64,
    /// Meters per keyframe.
    pub dynamic_velocity: f64,
    /// Keyframes of pure rotation before the trajectory starts translating.
    pub opening_rotation_keyframes: usize,
    /// Auxiliary static surface samples used for point-cloud fusion.
    pub n_dense_samples: usize,
    /// Length scale of the descriptor kernel, meters.
    pub descriptor_length_scale: f64,
    /// Pixel radius over which confidence dips around moving tracks.
    pub confidence_radius_px: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_static_landmarks: 300,
            n_dynamic_landmarks: 0,
            trajectory_kind: TrajectoryKind::Circle,
            n_keyframes: 40,
            pixel_noise_sigma: 0.5,
            prior_log_noise_sigma: 0.02,
            prior_scale_walk_sigma: 0.0,
            true_global_scale: 1.0,
            dynamic_velocity: 0.05,
            opening_rotation_keyframes: 0,
            n_dense_samples: 0,
            descriptor_length_scale: 0.5,
            confidence_radius_px: 20.0,
            intrinsics: CameraIntrinsics::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("pixel_noise_sigma", self.pixel_noise_sigma),
            ("prior_log_noise_sigma", self.prior_log_noise_sigma),
            ("prior_scale_walk_sigma", self.prior_scale_walk_sigma),
            ("dynamic_velocity", self.dynamic_velocity),
        ];
        for (name, v) in sigmas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.n_keyframes < 2 {
            return Err(Error::InvalidInput("n_keyframes must be >= 2".into()));
        }
        if self.opening_rotation_keyframes >= self.n_keyframes {
            return Err(Error::InvalidInput(
                "opening_rotation_keyframes must be below n_keyframes".into(),
            ));
        }
        if !(self.true_global_scale > 0.0) {
            return Err(Error::InvalidInput("true_global_scale must be > 0".into()));
        }
        if !(self.descriptor_length_scale > 0.0) || !(self.confidence_radius_px > 0.0) {
            return Err(Error::InvalidInput(
                "descriptor_length_scale and confidence_radius_px must be > 0".into(),
            ));
        }
        self.intrinsics.validate()
    }
}

/// One pixel track of a landmark in a keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Track {
    pub landmark_id: u64,
    pub pixel: Vec2,
    /// Metric depth prior for this pixel.
    pub prior_depth: f64,
    /// Prior confidence in `[0, 1]`.
    pub spatial_confidence: f64,
    /// Ground truth, for evaluation only. Estimators must not read it.
    pub is_dynamic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub keyframe_id: usize,
    pub tracks: Vec<Track>,
    /// Unit-norm global place descriptor.
    pub descriptor: DVector<f64>,
}

/// Auxiliary depth sample used only for point-cloud fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseSample {
    pub point_id: u64,
    pub pixel: Vec2,
    pub prior_depth: f64,
    pub spatial_confidence: f64,
    pub is_dynamic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseFrame {
    pub keyframe_id: usize,
    pub samples: Vec<DenseSample>,
}

/// Moving landmark with its true position at every keyframe.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicLandmark {
    pub id: u64,
    pub positions: Vec<Vec3>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub poses: Vec<Pose>,
    pub static_landmarks: Vec<Landmark>,
    pub dynamic_landmarks: Vec<DynamicLandmark>,
    pub observations: Vec<FrameObservation>,
    /// Hidden multiplicative drift `gamma_t` of the priors.
    pub scale_walk: Vec<f64>,
    pub dense_frames: Vec<DenseFrame>,
    pub dense_static_points: Vec<Vec3>,
    /// Per keyframe, the true positions of every dynamic dense sample.
    pub dense_dynamic_points: Vec<Vec<Vec3>>,
}

impl World {
    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.config.intrinsics
    }

    /// True position of `landmark_id` at keyframe `k`.
    pub fn landmark_position(&self, landmark_id: u64, k: usize) -> Option<Vec3> {
        let n_static = self.static_landmarks.len() as u64;
        if landmark_id < n_static {
            Some(self.static_landmarks[landmark_id as usize].position)
        } else {
            self.dynamic_landmarks
                .get((landmark_id - n_static) as usize)
                .map(|d| d.positions[k])
        }
    }

    /// Hidden total prior scale `s* * gamma_t` at keyframe `k`.
    pub fn prior_scale(&self, k: usize) -> f64 {
        self.config.true_global_scale * self.scale_walk[k]
    }
}

struct SceneLayout {
    static_min: Vec3,
    static_max: Vec3,
    dynamic_min: Vec3,
    dynamic_max: Vec3,
}

fn layout(kind: TrajectoryKind) -> SceneLayout {
    match kind {
        TrajectoryKind::Circle => SceneLayout {
            static_min: Vec3::new(-1.2, -1.2, -1.2),
            static_max: Vec3::new(1.2, 1.2, 1.2),
            dynamic_min: Vec3::new(-0.8, -0.8, -0.8),
            dynamic_max: Vec3::new(0.8, 0.8, 0.8),
        },
        TrajectoryKind::Lissajous => SceneLayout {
            static_min: Vec3::new(-3.0, -2.0, 3.5),
            static_max: Vec3::new(3.0, 2.0, 6.0),
            dynamic_min: Vec3::new(-1.2, -0.8, 1.5),
            dynamic_max: Vec3::new(1.2, 0.8, 2.5),
        },
        TrajectoryKind::LineWithReturn => SceneLayout {
            static_min: Vec3::new(-2.0, -1.5, 3.0),
            static_max: Vec3::new(5.0, 1.5, 5.0),
            dynamic_min: Vec3::new(-0.5, -0.8, 1.5),
            dynamic_max: Vec3::new(3.5, 0.8, 2.2),
        },
    }
}

/// Camera-to-world rotation of a camera at `eye` looking at `target`,
/// image `y` pointing towards world `+y`.
fn look_at(eye: &Vec3, target: &Vec3) -> UnitQuaternion<f64> {
    let forward = (target - eye).normalize();
    let down_hint = Vec3::new(0.0, 1.0, 0.0);
    let right = down_hint.cross(&forward).normalize();
    let down = forward.cross(&right);
    let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Camera centre and look-at target at trajectory phase `u` in `[0, 1)`.
fn trajectory_point(kind: TrajectoryKind, u: f64) -> (Vec3, Vec3) {
    use std::f64::consts::TAU;
    match kind {
        TrajectoryKind::Circle => {
            let a = TAU * u;
            let eye = Vec3::new(3.0 * a.sin(), 0.25 * (3.0 * a).sin(), -3.0 * a.cos());
            (eye, Vec3::zeros())
        }
        TrajectoryKind::Lissajous => {
            let a = TAU * u;
            let eye = Vec3::new(1.0 * a.sin(), 0.5 * (2.0 * a + 0.5).sin(), 0.3 * (a).cos() - 0.3);
            let target = Vec3::new(0.3 * eye.x, 0.3 * eye.y, 4.5);
            (eye, target)
        }
        TrajectoryKind::LineWithReturn => {
            let length = 3.0;
            let (x, y) = if u < 0.5 {
                (length * 2.0 * u, 0.0)
            } else {
                (length * 2.0 * (1.0 - u), 0.05)
            };
            let eye = Vec3::new(x, y, 0.0);
            let target = Vec3::new(x + 0.2 * (TAU * 2.0 * u).sin(), y, 4.0);
            (eye, target)
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform_in_box(rng: &mut ChaCha8Rng, lo: &Vec3, hi: &Vec3) -> Vec3 {
    Vec3::new(
        rng.random_range(lo.x..hi.x),
        rng.random_range(lo.y..hi.y),
        rng.random_range(lo.z..hi.z),
    )
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

fn ground_truth_poses(cfg: &WorldConfig) -> Vec<Pose> {
    let n = cfg.n_keyframes;
    let m = cfg.opening_rotation_keyframes;
    let moving = (n - m).max(1);
    (0..n)
        .map(|k| {
            if k < m {
                let (eye, target) = trajectory_point(cfg.trajectory_kind, 0.0);
                let yaw = 0.02 * (k as f64 - m as f64);
                let spin = UnitQuaternion::from_axis_angle(&Vec3::y_axis(), yaw);
                Pose::from_center(spin * look_at(&eye, &target), eye)
            } else {
                let u = (k - m) as f64 / moving as f64;
                let (eye, target) = trajectory_point(cfg.trajectory_kind, u);
                Pose::from_center(look_at(&eye, &target), eye)
            }
        })
        .collect()
}

/// Place descriptor: normalized random Fourier features of the camera
/// centre and viewing direction, seeded by `seed`.
pub fn simulate_descriptor(pose: &Pose, cfg: &WorldConfig) -> DVector<f64> {
    const DIRECTION_WEIGHT: f64 = 1.0;
    let mut rng = stream_rng(cfg.seed, 0xDE5C);
    let normal = Normal::new(0.0, 1.0 / cfg.descriptor_length_scale).unwrap();
    let center = pose.camera_center();
    let forward = pose.rotation.inverse() * Vec3::z();
    let z = [
        center.x,
        center.y,
        center.z,
        DIRECTION_WEIGHT * forward.x,
        DIRECTION_WEIGHT * forward.y,
        DIRECTION_WEIGHT * forward.z,
    ];
    let mut out = DVector::zeros(DESCRIPTOR_DIM);
    for i in 0..DESCRIPTOR_DIM {
        let mut dot = 0.0;
        for zj in z {
            dot += normal.sample(&mut rng) * zj;
        }
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        out[i] = (dot + phase).cos();
    }
    let n = out.norm();
    if n > 0.0 {
        out /= n;
    } else {
        out[0] = 1.0;
    }
    out
}

/// Confidence of a pixel given the true pixels of the moving tracks in the frame.
fn confidence(pixel: &Vec2, dynamic_pixels: &[Vec2], radius: f64, base: f64) -> f64 {
    let r2 = dynamic_pixels
        .iter()
        .map(|q| (q - pixel).norm_squared())
        .fold(f64::INFINITY, f64::min);
    let c = if r2.is_finite() {
        CONF_FLOOR + (base - CONF_FLOOR) * (1.0 - (-r2 / (2.0 * radius * radius)).exp())
    } else {
        base
    };
    c.clamp(0.0, 1.0)
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let k = cfg.intrinsics;
    let lay = layout(cfg.trajectory_kind);
    let poses = ground_truth_poses(cfg);
    let n = cfg.n_keyframes;

    let mut lm_rng = stream_rng(cfg.seed, 1);
    let static_landmarks: Vec<Landmark> = (0..cfg.n_static_landmarks)
        .map(|i| Landmark::new(i as u64, uniform_in_box(&mut lm_rng, &lay.static_min, &lay.static_max)))
        .collect();

    let mut dyn_rng = stream_rng(cfg.seed, 2);
    let dynamic_landmarks: Vec<DynamicLandmark> = (0..cfg.n_dynamic_landmarks)
        .map(|i| {
            let start = uniform_in_box(&mut dyn_rng, &lay.dynamic_min, &lay.dynamic_max);
            let dir = unit_vector(&mut dyn_rng);
            DynamicLandmark {
                id: (cfg.n_static_landmarks + i) as u64,
                positions: (0..n)
                    .map(|t| start + dir * (cfg.dynamic_velocity * t as f64))
                    .collect(),
            }
        })
        .collect();

    let mut walk_rng = stream_rng(cfg.seed, 3);
    let mut scale_walk = Vec::with_capacity(n);
    let mut log_gamma = 0.0;
    for t in 0..n {
        if t > 0 && cfg.prior_scale_walk_sigma > 0.0 {
            log_gamma += Normal::new(0.0, cfg.prior_scale_walk_sigma).unwrap().sample(&mut walk_rng);
        }
        scale_walk.push(f64::exp(log_gamma));
    }

    let mut dense_rng = stream_rng(cfg.seed, 5);
    let dense_static_points: Vec<Vec3> = (0..cfg.n_dense_samples)
        .map(|_| uniform_in_box(&mut dense_rng, &lay.static_min, &lay.static_max))
        .collect();
    let dense_offsets: Vec<Vec3> = (0..cfg.n_dynamic_landmarks * DYNAMIC_SAMPLES_PER_OBJECT)
        .map(|_| unit_vector(&mut dense_rng) * DYNAMIC_SAMPLE_RADIUS)
        .collect();

    let mut obs_rng = stream_rng(cfg.seed, 4);
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise_sigma.max(0.0)).unwrap();
    let log_noise = Normal::new(0.0, cfg.prior_log_noise_sigma.max(0.0)).unwrap();

    let mut observations = Vec::with_capacity(n);
    let mut dense_frames = Vec::with_capacity(n);
    let mut dense_dynamic_points = Vec::with_capacity(n);
    for (t, pose) in poses.iter().enumerate() {
        let prior_scale = cfg.true_global_scale * scale_walk[t];

        // (id, camera point, true pixel, dynamic)
        let mut visible: Vec<(u64, Vec3, Vec2, bool)> = Vec::new();
        let candidates = static_landmarks
            .iter()
            .map(|l| (l.id, l.position, false))
            .chain(dynamic_landmarks.iter().map(|d| (d.id, d.positions[t], true)));
        for (id, xw, is_dyn) in candidates {
            let xc = pose.transform(&xw);
            if xc.z < MIN_VISIBLE_DEPTH {
                continue;
            }
            if let Some(px) = k.project_camera_point(&xc) {
                if k.contains(&px) {
                    visible.push((id, xc, px, is_dyn));
                }
            }
        }
        if visible.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no landmark visible at keyframe {t}"
            )));
        }
        let dyn_pixels: Vec<Vec2> = visible.iter().filter(|v| v.3).map(|v| v.2).collect();

        let mut tracks = Vec::with_capacity(visible.len());
        for (id, xc, px, is_dyn) in visible {
            let noise = Vec2::new(pixel_noise.sample(&mut obs_rng), pixel_noise.sample(&mut obs_rng));
            let eps = log_noise.sample(&mut obs_rng);
            let base = CONF_BASE + 0.1 * obs_rng.random::<f64>();
            tracks.push(Track {
                landmark_id: id,
                pixel: px + noise,
                prior_depth: prior_scale * xc.z * eps.exp(),
                spatial_confidence: confidence(&px, &dyn_pixels, cfg.confidence_radius_px, base),
                is_dynamic: is_dyn,
            });
        }
        observations.push(FrameObservation {
            keyframe_id: t,
            tracks,
            descriptor: simulate_descriptor(pose, cfg),
        });

        let dyn_points: Vec<Vec3> = dynamic_landmarks
            .iter()
            .enumerate()
            .flat_map(|(i, d)| {
                let offsets = &dense_offsets[i * DYNAMIC_SAMPLES_PER_OBJECT..(i + 1) * DYNAMIC_SAMPLES_PER_OBJECT];
                let p = d.positions[t];
                offsets.iter().map(move |o| p + o)
            })
            .collect();
        let mut samples = Vec::new();
        let n_dense_static = dense_static_points.len() as u64;
        let dense_candidates = dense_static_points
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u64, *p, false))
            .chain(
                dyn_points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (n_dense_static + i as u64, *p, true)),
            );
        for (id, xw, is_dyn) in dense_candidates {
            let xc = pose.transform(&xw);
            if xc.z < MIN_VISIBLE_DEPTH {
                continue;
            }
            let Some(px) = k.project_camera_point(&xc) else {
                continue;
            };
            if !k.contains(&px) {
                continue;
            }
            let noise = Vec2::new(pixel_noise.sample(&mut obs_rng), pixel_noise.sample(&mut obs_rng));
            let eps = log_noise.sample(&mut obs_rng);
            let base = CONF_BASE + 0.1 * obs_rng.random::<f64>();
            samples.push(DenseSample {
                point_id: id,
                pixel: px + noise,
                prior_depth: prior_scale * xc.z * eps.exp(),
                spatial_confidence: confidence(&px, &dyn_pixels, cfg.confidence_radius_px, base),
                is_dynamic: is_dyn,
            });
        }
        dense_frames.push(DenseFrame {
            keyframe_id: t,
            samples,
        });
        dense_dynamic_points.push(dyn_points);
    }

    Ok(World {
        config: cfg.clone(),
        poses,
        static_landmarks,
        dynamic_landmarks,
        observations,
        scale_walk,
        dense_frames,
        dense_static_points,
        dense_dynamic_points,
    })
}
