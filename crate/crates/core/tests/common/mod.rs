//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use metric_slam::experiment::ExperimentConfig;
use metric_slam::factors::{Factor, Measurement, RayAnchor};
use metric_slam::geometry::{plucker_from_camera, project, se3_exp, CameraIntrinsics, Pose, Vec2, Vec3};
use nalgebra::{DMatrix, UnitQuaternion, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bundled experiment configuration by file stem.
pub fn bundled_config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn bundled_config_names() -> Vec<String> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .expect("configs directory")
        .filter_map(|e| {
            let p = e.ok()?.path();
            if p.extension()? != "toml" {
                return None;
            }
            Some(p.file_stem()?.to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
}

pub fn random_rotation(r: &mut impl Rng, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let angle = r.random_range(-max_angle..max_angle);
    UnitQuaternion::from_scaled_axis(axis.normalize() * angle)
}

pub fn random_vec3(r: &mut impl Rng, half_width: f64) -> Vec3 {
    Vec3::new(
        r.random_range(-half_width..half_width),
        r.random_range(-half_width..half_width),
        r.random_range(-half_width..half_width),
    )
}

/// Camera somewhere near the origin looking roughly along +z.
pub fn random_pose(r: &mut impl Rng) -> Pose {
    Pose::from_center(random_rotation(r, 0.4), random_vec3(r, 1.0))
}

/// Point 2 to 8 m in front of `pose`, inside its image.
pub fn point_in_view(r: &mut impl Rng, pose: &Pose, k: &CameraIntrinsics) -> Vec3 {
    let px = Vec2::new(r.random_range(40.0..600.0), r.random_range(40.0..440.0));
    let depth = r.random_range(2.0..8.0);
    let xc = k.unproject(&px) * depth;
    pose.inverse().transform(&xc)
}

pub fn noisy_pixel(r: &mut impl Rng, pose: &Pose, x: &Vec3, k: &CameraIntrinsics, sigma: f64) -> Vec2 {
    project(k, pose, x).expect("point in front") + Vec2::new(r.random_range(-sigma..sigma), r.random_range(-sigma..sigma))
}

/// One random instance of each factor family with its variable values.
pub struct FactorCase {
    pub name: &'static str,
    pub factor: Factor,
    pub poses: Vec<Pose>,
    pub landmark: Option<Vec3>,
}

pub fn random_factor_cases(r: &mut impl Rng, k: &CameraIntrinsics) -> Vec<FactorCase> {
    let pose = random_pose(r);
    let x = point_in_view(r, &pose, k);
    let px = noisy_pixel(r, &pose, &x, k, 3.0);
    // ray from a slightly different camera so the residual is not zero
    let ray_pose = pose.retract(&Vector6::from_iterator((0..6).map(|_| r.random_range(-0.02..0.02))));
    let ray = plucker_from_camera(&ray_pose, &px, k);
    let mut variable = Factor::ray(0, 0, ray, px, 1.0, 1.0);
    variable.measurement = Measurement::Ray {
        ray,
        pixel: px,
        anchor: RayAnchor::Variable,
    };
    let depth = pose.transform(&x).z * r.random_range(0.8..1.25);
    let other = random_pose(r);
    let rel = pose.compose(&other.inverse());
    let noisy_rot = random_rotation(r, 0.05) * rel.rotation;
    let noisy_dir = rel.translation + random_vec3(r, 0.1);
    vec![
        FactorCase {
            name: "reprojection",
            factor: Factor::reprojection(0, 0, px, 1.0, 1.0),
            poses: vec![pose],
            landmark: Some(x),
        },
        FactorCase {
            name: "ray_fixed",
            factor: Factor::ray(0, 0, ray, px, 1.0, 1.0),
            poses: vec![pose],
            landmark: Some(x),
        },
        FactorCase {
            name: "ray_variable",
            factor: variable,
            poses: vec![pose],
            landmark: Some(x),
        },
        FactorCase {
            name: "depth",
            factor: Factor::depth_prior(0, 0, depth, 1.0, 1.0),
            poses: vec![pose],
            landmark: Some(x),
        },
        FactorCase {
            name: "relative_pose",
            factor: Factor::relative_pose(0, 1, noisy_rot, noisy_dir, 1.0, 1.0),
            poses: vec![pose, other],
            landmark: None,
        },
    ]
}

fn residual(case: &FactorCase, poses: &[Pose], landmark: Option<&Vec3>, k: &CameraIntrinsics) -> nalgebra::DVector<f64> {
    let lin = case.factor.linearize(poses, landmark, k);
    assert!(lin.active, "{} inactive", case.name);
    lin.residual
}

/// Largest relative Frobenius error between the analytic Jacobian blocks
/// and central differences with step [`FD_STEP`], over every block the
/// factor depends on. Pose blocks are perturbed on the left.
pub fn jacobian_fd_error(case: &FactorCase, k: &CameraIntrinsics) -> f64 {
    let lin = case.factor.linearize(&case.poses, case.landmark.as_ref(), k);
    assert!(lin.active);
    let mut worst: f64 = 0.0;
    let rel = |an: &DMatrix<f64>, fd: &DMatrix<f64>| (an - fd).norm() / an.norm().max(fd.norm()).max(1e-12);
    for (slot, jac) in lin.jac_poses.iter().enumerate() {
        let dim = lin.residual.len();
        let mut fd = DMatrix::zeros(dim, 6);
        for c in 0..6 {
            let mut step = Vector6::zeros();
            step[c] = FD_STEP;
            let mut plus = case.poses.clone();
            let mut minus = case.poses.clone();
            plus[slot] = se3_exp(&step).compose(&case.poses[slot]);
            minus[slot] = se3_exp(&-step).compose(&case.poses[slot]);
            let d = (residual(case, &plus, case.landmark.as_ref(), k) - residual(case, &minus, case.landmark.as_ref(), k))
                / (2.0 * FD_STEP);
            fd.set_column(c, &d);
        }
        match jac {
            Some(an) => worst = worst.max(rel(an, &fd)),
            // no pose dependence: the numeric Jacobian must vanish
            None => worst = worst.max(fd.norm()),
        }
    }
    if let (Some(x), Some(an)) = (case.landmark, &lin.jac_landmark) {
        let mut fd = DMatrix::zeros(lin.residual.len(), 3);
        for c in 0..3 {
            let mut h = Vec3::zeros();
            h[c] = FD_STEP;
            let d = (residual(case, &case.poses, Some(&(x + h)), k) - residual(case, &case.poses, Some(&(x - h)), k))
                / (2.0 * FD_STEP);
            fd.set_column(c, &d);
        }
        worst = worst.max(rel(an, &fd));
    }
    worst
}

/// Drives the per-keyframe weighted estimate and the scale filter with
/// ground-truth map depths, so the published scale should follow the
/// hidden prior scale. Weights come from the uncertainty gate evaluated on
/// the priors with ground-truth relative poses. Returns the published
/// scale after each keyframe.
pub fn filter_with_true_depths(
    world: &metric_slam::World,
    params: &metric_slam::GateParams,
    q: f64,
) -> Vec<f64> {
    use metric_slam::gating::{fuse_uncertainty, gate, spatial_uncertainty, temporal_uncertainty};
    use metric_slam::scale::{kalman_predict, kalman_update, wls_log_scale};
    use metric_slam::ScaleBelief;
    use std::collections::HashMap;

    let k = world.intrinsics();
    let mut belief = ScaleBelief::default();
    let mut out = Vec::new();
    for (t, obs) in world.observations.iter().enumerate() {
        let pose = world.poses[t];
        let mut true_depth = Vec::new();
        for tr in &obs.tracks {
            let x = world.landmark_position(tr.landmark_id, t).expect("known landmark");
            true_depth.push(pose.transform(&x).z);
        }
        let spatial: Vec<f64> = obs.tracks.iter().map(|tr| spatial_uncertainty(tr.spatial_confidence)).collect();
        let temporal = if t == 0 {
            vec![params.tau; obs.tracks.len()]
        } else {
            // priors of the previous keyframe moved into this one
            let prev: HashMap<u64, _> = world.observations[t - 1].tracks.iter().map(|p| (p.landmark_id, *p)).collect();
            let rel = pose.compose(&world.poses[t - 1].inverse());
            obs.tracks
                .iter()
                .map(|tr| match prev.get(&tr.landmark_id) {
                    Some(p) => temporal_uncertainty(&[p.pixel], &[p.prior_depth], &[tr.prior_depth], &rel, k).unwrap()[0],
                    None => params.tau,
                })
                .collect()
        };
        let field = gate(&fuse_uncertainty(&spatial, &temporal, params).unwrap(), params);
        let priors: Vec<f64> = obs.tracks.iter().map(|tr| tr.prior_depth).collect();
        let o = wls_log_scale(&true_depth, &priors, &field.omega).unwrap();
        belief = kalman_update(&kalman_predict(&belief, q), &o);
        out.push(belief.scale());
    }
    out
}

/// Dense Gauss-Newton Hessian over the free variables, ordered as free
/// poses (6 each, twist `(omega, v)`) then free landmarks, together with the
/// global scale direction in the same ordering.
pub fn dense_hessian_and_scale_direction(g: &metric_slam::FactorGraph) -> (DMatrix<f64>, nalgebra::DVector<f64>) {
    use metric_slam::factors::huber_weight;
    use metric_slam::optimizer::scale_direction;

    let mut pose_col = vec![None; g.poses.len()];
    let mut n = 0;
    for (i, slot) in pose_col.iter_mut().enumerate() {
        if g.pose_is_free(i) {
            *slot = Some(n);
            n += 6;
        }
    }
    let mut lm_col = vec![None; g.landmarks.len()];
    for (j, slot) in lm_col.iter_mut().enumerate() {
        if !g.landmarks[j].fixed {
            *slot = Some(n);
            n += 3;
        }
    }
    let mut h = DMatrix::zeros(n, n);
    for f in &g.factors {
        let poses: Vec<Pose> = f.pose_ids.iter().map(|&p| g.poses[p].pose).collect();
        let lm = f.landmark_id.map(|l| g.landmarks[l].position);
        let lin = f.linearize(&poses, lm.as_ref(), &g.intrinsics);
        if !lin.active {
            continue;
        }
        let mut j = DMatrix::zeros(lin.residual.len(), n);
        for (slot, &p) in f.pose_ids.iter().enumerate() {
            if let (Some(c), Some(jp)) = (pose_col[p], &lin.jac_poses[slot]) {
                j.view_mut((0, c), (jp.nrows(), 6)).copy_from(jp);
            }
        }
        if let (Some(l), Some(jl)) = (f.landmark_id, &lin.jac_landmark) {
            if let Some(c) = lm_col[l] {
                j.view_mut((0, c), (jl.nrows(), 3)).copy_from(jl);
            }
        }
        let s = f.information * huber_weight(lin.residual.norm(), f.robust_delta);
        h += j.transpose() * &j * s;
    }
    let dir = scale_direction(g);
    let mut v = nalgebra::DVector::zeros(n);
    for (i, c) in pose_col.iter().enumerate() {
        if let Some(c) = c {
            v.rows_mut(*c, 6).copy_from(&dir.poses[i]);
        }
    }
    for (j, c) in lm_col.iter().enumerate() {
        if let Some(c) = c {
            v.rows_mut(*c, 3).copy_from(&dir.landmarks[j]);
        }
    }
    (h, v)
}

/// Mean distance of the camera centres from the first camera, a scale
/// measure of a trajectory.
pub fn trajectory_extent(poses: &[Pose]) -> f64 {
    let c0 = poses[0].camera_center();
    poses.iter().map(|p| (p.camera_center() - c0).norm()).sum::<f64>() / poses.len() as f64
}

/// Loop candidates whose two frames come from worlds with different seeds:
/// landmark ids coincide but the geometry is unrelated, so every one of
/// them is a false loop. Returns the verified candidates.
pub fn planted_negative_loops(
    query_world: &metric_slam::World,
    match_world: &metric_slam::World,
    count: usize,
    params: &metric_slam::loops::LoopParams,
) -> Vec<metric_slam::loops::LoopCandidate> {
    use metric_slam::loops::{verify_loop, LoopCandidate};
    let n = query_world.observations.len().min(match_world.observations.len());
    (0..count)
        .map(|i| {
            let q = n - 1 - (i % (n / 2));
            let m = (i * 7) % (n / 2);
            let candidate = LoopCandidate {
                query_id: q,
                match_id: m,
                cosine_similarity: 1.0,
                inliers: 0,
                relative_pose: None,
                accepted: false,
            };
            verify_loop(
                &candidate,
                &query_world.observations[q].tracks,
                &match_world.observations[m].tracks,
                query_world.intrinsics(),
                params,
            )
        })
        .collect()
}
