mod common;

use common::bundled_config;
use metric_slam::experiment::execute;
use metric_slam::factors::{Measurement, RayAnchor};
use metric_slam::geometry::ray_point_distance;
use metric_slam::pipeline::{metric_init, run_pipeline, Ablation, Mode, PipelineConfig};
use metric_slam::sim::generate_world;
use metric_slam::{FactorKind, WorldConfig};

fn short_world(seed: u64, n: usize) -> metric_slam::World {
    generate_world(&WorldConfig {
        seed,
        n_keyframes: n,
        ..WorldConfig::default()
    })
    .unwrap()
}

#[test]
fn published_scale_is_positive_at_every_keyframe() {
    let world = short_world(2, 25);
    let state = run_pipeline(&world.observations, world.intrinsics(), &PipelineConfig::default(), Ablation::default()).unwrap();
    assert_eq!(state.mode, Mode::Tracking);
    let history = state.scale_history();
    assert_eq!(history.len(), 25);
    assert!(history.iter().all(|s| *s > 0.0 && s.is_finite()));
    assert!(state.keyframes.iter().all(|k| k.gate.is_some() && k.wls.is_some()));
}

#[test]
fn streaming_scale_has_no_lookahead() {
    let world = short_world(3, 30);
    let config = PipelineConfig::default();
    let batch = run_pipeline(&world.observations, world.intrinsics(), &config, Ablation::default()).unwrap();

    let mut state = metric_init(&world.observations, world.intrinsics(), &config, Ablation::default()).unwrap();
    for k in 0..state.init_window {
        assert_eq!(state.keyframes[k].scale, batch.keyframes[k].scale);
    }
    for obs in &world.observations[state.init_window..] {
        state.process_keyframe(obs).unwrap();
        let k = state.keyframes.len() - 1;
        // the belief published at k is final the moment k is processed
        assert_eq!(state.keyframes[k].scale, batch.keyframes[k].scale, "keyframe {k}");
    }
    state.finish().unwrap();
    assert_eq!(state.graph.poses, batch.graph.poses);
}

#[test]
fn rays_are_created_only_once_the_map_is_metric() {
    let world = generate_world(&WorldConfig {
        seed: 4,
        pixel_noise_sigma: 0.0,
        prior_log_noise_sigma: 0.0,
        ..WorldConfig::default()
    })
    .unwrap();
    let state = metric_init(&world.observations, world.intrinsics(), &PipelineConfig::default(), Ablation::default()).unwrap();
    assert_eq!(state.mode, Mode::Tracking);
    let n = state.init_window;
    let mut distances = Vec::new();
    for f in &state.graph.factors {
        if let Measurement::Ray { ray, anchor, .. } = &f.measurement {
            assert_eq!(*anchor, RayAnchor::Fixed);
            assert!(f.pose_ids[0] < n);
            let x = state.graph.landmarks[f.landmark_id.unwrap()].position;
            distances.push(ray_point_distance(ray, &x));
        }
    }
    assert!(!distances.is_empty());
    // rays lifted before the metric rescaling would miss their points by
    // a large fraction of the scene depth
    distances.sort_by(f64::total_cmp);
    let median = distances[distances.len() / 2];
    assert!(median < 1e-3, "median ray distance {median}");
}

#[test]
fn gate_down_weights_moving_tracks() {
    let config = bundled_config("dynamic_30pct");
    let world = generate_world(&config.world).unwrap();
    let state = run_pipeline(&world.observations, world.intrinsics(), &config.pipeline, Ablation::default()).unwrap();
    let (mut dyn_w, mut static_w) = (Vec::new(), Vec::new());
    for kf in &state.keyframes[1..] {
        let gate = kf.gate.as_ref().unwrap();
        for (t, w) in kf.tracks.iter().zip(&gate.w) {
            if t.is_dynamic {
                dyn_w.push(*w)
            } else {
                static_w.push(*w)
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!dyn_w.is_empty());
    assert!(mean(&dyn_w) < mean(&static_w), "dynamic {} static {}", mean(&dyn_w), mean(&static_w));
}

#[test]
fn each_ablation_flag_switches_only_its_own_path() {
    let mut config = bundled_config("default_noisy");
    config.world.n_keyframes = 15;
    config.world.n_dense_samples = 0;
    let features = ["ray_factor", "uncertainty_gate", "kalman_filter", "weighted_scale"];
    let feature_line = |report: &str, name: &str| -> String {
        report
            .lines()
            .find(|l| l.starts_with(&format!("feature {name} ")))
            .unwrap_or_else(|| panic!("no line for {name}"))
            .to_string()
    };
    let full = execute(&config, Ablation::default()).unwrap();
    let full_report = full.run_report();
    for name in features {
        assert!(feature_line(&full_report, name).contains(" on "), "{full_report}");
    }
    for (flag, feature) in Ablation::FLAGS.iter().zip(features) {
        let outcome = execute(&config, Ablation::from_flags(&[flag.to_string()]).unwrap()).unwrap();
        let report = outcome.run_report();
        for name in features {
            let line = feature_line(&report, name);
            if name == feature {
                assert!(line.contains(" off "), "{flag}: {line}");
            } else {
                assert!(line.contains(" on "), "{flag} switched off {name}: {line}");
            }
        }
        let rays = outcome.state.graph.count_kind(FactorKind::RayDistance);
        assert_eq!(rays == 0, *flag == "no_ray_factor");
    }
}
