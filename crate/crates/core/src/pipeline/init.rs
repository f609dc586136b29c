//! Two-view metric initialization.

use std::collections::BTreeMap;

use super::frontend::{median_parallax_deg, refine_pose, triangulate, Correspondence};
use super::{Ablation, KeyframeRecord, Mode, PipelineConfig, PipelineState};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Vec3};
use crate::loops::ransac_essential;
use crate::optimizer::{solve, FactorGraph, SolveOptions};
use crate::scale::{wls_log_scale, ScaleBelief, UNINFORMED_VARIANCE};
use crate::sim::FrameObservation;

const RANSAC_ITERATIONS: usize = 200;
const RANSAC_SEED: u64 = 0x1417;
const RANSAC_TOL_PX: f64 = 2.0;
const MIN_INIT_POINTS: usize = 12;

/// Ids visible in every frame of `frames`, with their pixels per frame.
fn continuous_tracks(frames: &[FrameObservation]) -> BTreeMap<u64, Vec<(usize, Vec2)>> {
    let mut out: BTreeMap<u64, Vec<(usize, Vec2)>> = BTreeMap::new();
    for (i, t) in frames[0].tracks.iter().enumerate() {
        out.insert(t.landmark_id, vec![(i, t.pixel)]);
    }
    for f in &frames[1..] {
        let here: BTreeMap<u64, (usize, Vec2)> = f
            .tracks
            .iter()
            .enumerate()
            .map(|(i, t)| (t.landmark_id, (i, t.pixel)))
            .collect();
        out.retain(|id, v| match here.get(id) {
            Some(&o) => {
                v.push(o);
                true
            }
            None => false,
        });
    }
    out
}

/// Smallest window starting at frame 0 whose end frame has enough
/// rotation-compensated parallax.
fn select_window(
    frames: &[FrameObservation],
    k: &CameraIntrinsics,
    config: &PipelineConfig,
) -> Result<(usize, BTreeMap<u64, Vec<(usize, Vec2)>>)> {
    let cap = (4 * config.n_init).min(frames.len());
    if frames.len() < config.n_init {
        return Err(Error::InitFailure(format!(
            "need {} frames, got {}",
            config.n_init,
            frames.len()
        )));
    }
    let mut best = 0.0_f64;
    for n in config.n_init..=cap {
        let tracks = continuous_tracks(&frames[..n]);
        if tracks.len() < MIN_INIT_POINTS {
            return Err(Error::InitFailure(format!(
                "only {} landmarks visible across the first {n} frames",
                tracks.len()
            )));
        }
        let a: Vec<Vec3> = tracks.values().map(|v| k.unproject(&v[0].1).normalize()).collect();
        let b: Vec<Vec3> = tracks.values().map(|v| k.unproject(&v[n - 1].1).normalize()).collect();
        let parallax = median_parallax_deg(&a, &b);
        if parallax >= config.parallax_min_deg {
            return Ok((n, tracks));
        }
        best = best.max(parallax);
    }
    Err(Error::InitFailure(format!(
        "median parallax {best:.3} deg below {} deg within {cap} frames",
        config.parallax_min_deg
    )))
}

/// Pose interpolated between `a` and `b` on camera centre and orientation.
fn interpolate(a: &Pose, b: &Pose, t: f64) -> Pose {
    let ra = a.rotation.inverse();
    let rb = b.rotation.inverse();
    let rot = ra.slerp(&rb, t);
    Pose::from_center(rot, a.camera_center().lerp(&b.camera_center(), t))
}

/// Reconstructs the first frames up to scale, fixes the metric scale from
/// the depth priors and returns a tracking-ready state.
pub fn metric_init(
    frames: &[FrameObservation],
    k: &CameraIntrinsics,
    config: &PipelineConfig,
    ablation: Ablation,
) -> Result<PipelineState> {
    config.validate()?;
    k.validate()?;
    let (n, tracks) = select_window(frames, k, config)?;

    let ids: Vec<u64> = tracks.keys().copied().collect();
    let x1: Vec<Vec3> = tracks.values().map(|v| k.unproject(&v[0].1)).collect();
    let x2: Vec<Vec3> = tracks.values().map(|v| k.unproject(&v[n - 1].1)).collect();
    let tol = RANSAC_TOL_PX / k.fx.max(k.fy);
    let fit = ransac_essential(&x1, &x2, RANSAC_ITERATIONS, tol, RANSAC_SEED)
        .ok_or_else(|| Error::InitFailure("no essential matrix found".into()))?;
    let last = fit.relative_pose;

    // triangulate the two-view inliers
    let mut points: BTreeMap<u64, Vec3> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if !fit.inlier_mask[i] {
            continue;
        }
        let obs = &tracks[id];
        let views = [(Pose::identity(), obs[0].1), (last, obs[n - 1].1)];
        if let Some(x) = triangulate(&views, k) {
            points.insert(*id, x);
        }
    }
    if points.len() < MIN_INIT_POINTS {
        return Err(Error::InitFailure(format!(
            "only {} points triangulated from the initial pair",
            points.len()
        )));
    }

    let info = 1.0 / (config.pixel_sigma * config.pixel_sigma);
    let mut poses = vec![Pose::identity(); n];
    poses[n - 1] = last;
    for (f, pose) in poses.iter_mut().enumerate().take(n - 1).skip(1) {
        let seed = interpolate(&Pose::identity(), &last, f as f64 / (n - 1) as f64);
        let corr: Vec<Correspondence> = points
            .iter()
            .map(|(id, x)| Correspondence {
                point: *x,
                pixel: tracks[id][f].1,
                information: info,
            })
            .collect();
        *pose = refine_pose(&seed, &corr, k, config.huber_pixel, 20)?.0;
    }

    let mut state = PipelineState {
        config: config.clone(),
        ablation,
        graph: FactorGraph::new(*k),
        scale: ScaleBelief::default(),
        map_unit: 1.0,
        keyframes: Vec::with_capacity(frames.len()),
        mode: Mode::Initializing,
        init_window: n,
        paths: Default::default(),
        segments: BTreeMap::new(),
        priors_done: 0,
    };
    for (f, pose) in poses.iter().enumerate() {
        state.graph.add_pose(*pose, false);
        state.keyframes.push(KeyframeRecord::new(&frames[f], state.scale));
        state.update_segments(f);
    }
    state.graph.gauge = 0;
    for (id, x) in &points {
        let l = state.graph.add_landmark(*id, *x);
        let seg = state.segments.get_mut(id).expect("continuous tracks have segments");
        seg.map_point = Some(l);
        for (f, i) in seg.obs.clone() {
            state.attach_observation(f, i, l);
        }
    }
    solve(
        &mut state.graph,
        &SolveOptions {
            max_iterations: 30,
            ..SolveOptions::default()
        },
    )
    .map_err(|e| Error::InitFailure(format!("initial bundle adjustment: {e}")))?;

    // pass 1: spatial gates only; pass 2: full gates on the rescaled map
    let mut total = 1.0;
    for spatial_only in [true, false] {
        let mut pooled: [Vec<f64>; 3] = Default::default();
        for j in 0..n {
            let field = state.compute_gate(j, spatial_only)?;
            let [d, p, w] = state.scale_samples(j, &field, 1.0);
            pooled[0].extend(d);
            pooled[1].extend(p);
            pooled[2].extend(w);
        }
        let obs = wls_log_scale(&pooled[0], &pooled[1], &pooled[2]).map_err(|e| match e {
            Error::NoInformation => Error::InitFailure("no informative depth prior in the initial window".into()),
            other => other,
        })?;
        let s = obs.log_scale.exp();
        state.graph.scale_about_gauge(s);
        total *= s;
    }

    // per-keyframe filtering over the initial window in raw units
    state.map_unit = total;
    state.scale = ScaleBelief::new(total.ln(), UNINFORMED_VARIANCE, 0);
    for j in 0..n {
        state.process_priors(j)?;
    }
    state.map_unit = state.scale.scale();
    let c0 = state.pose(0).camera_center();
    let all: Vec<usize> = (0..n).collect();
    state.graph.reanchor_rays(&all, 1.0, &c0);

    // remaining tracks seen at least twice in the window
    state.triangulate_new(n - 1);
    state.mode = Mode::Tracking;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_world, WorldConfig};

    #[test]
    fn init_recovers_metric_trajectory() {
        let world = generate_world(&WorldConfig {
            true_global_scale: 2.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let config = PipelineConfig::default();
        let state = metric_init(&world.observations, world.intrinsics(), &config, Ablation::default()).unwrap();
        assert_eq!(state.mode, Mode::Tracking);
        let n = state.init_window;
        assert!(n >= config.n_init);
        // relative motion of the last init frame, compared in metric units
        let est = state.pose(n - 1).compose(&state.pose(0).inverse());
        let gt = world.poses[n - 1].compose(&world.poses[0].inverse());
        let ratio = est.translation.norm() / (2.0 * gt.translation.norm());
        assert!((ratio - 1.0).abs() < 0.03, "ratio {ratio}");
        assert!((est.rotation.angle_to(&gt.rotation)).to_degrees() < 0.5);
        assert!((state.scale_correction() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_rotation_fails_to_initialize() {
        let world = generate_world(&WorldConfig {
            opening_rotation_keyframes: 39,
            ..WorldConfig::default()
        })
        .unwrap();
        let err = metric_init(&world.observations, world.intrinsics(), &PipelineConfig::default(), Ablation::default())
            .unwrap_err();
        assert!(matches!(err, Error::InitFailure(_)), "{err}");
    }
}
