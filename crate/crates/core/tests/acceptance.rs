//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any criterion fails. Runs as a plain binary so the lines always show.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{
    bundled_config, bundled_config_names, filter_with_true_depths, jacobian_fd_error, planted_negative_loops,
    random_factor_cases, random_rotation, random_vec3, rng, trajectory_extent,
};
use metric_slam::eval::{align_points, AlignMode};
use metric_slam::experiment::{execute_on, observability_graphs, observability_report, write_outputs, ExperimentConfig};
use metric_slam::geometry::CameraIntrinsics;
use metric_slam::optimizer::{cost_along_scale, scale_direction_derivative, solve, SolveOptions};
use metric_slam::pipeline::{Ablation, PipelineConfig};
use metric_slam::scale::{kalman_predict, kalman_update, ScaleObservation};
use metric_slam::sim::generate_world;
use metric_slam::{FactorKind, Pose, ScaleBelief, Vec3, WorldConfig};
use rand::Rng;

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check {
        pass,
        detail: detail.into(),
    }
}

fn seeded(config: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = config.clone();
    c.world.seed = seed;
    c
}

fn scale_null_space() -> Check {
    let world = generate_world(&WorldConfig {
        seed: 1,
        n_keyframes: 12,
        n_static_landmarks: 300,
        ..WorldConfig::default()
    })
    .unwrap();
    let (repro, _) = observability_graphs(&world, &PipelineConfig::default());
    let report = scale_direction_derivative(&repro);
    let d = report.family(FactorKind::Reprojection).unwrap().derivative.abs();
    let rel = d / report.gradient_norm;
    check(
        rel < 1e-9,
        format!("|dC/ds| / |grad C| = {rel:.2e} (< 1e-9), {} factors", repro.factors.len()),
    )
}

fn fisher_identifiability() -> Check {
    let world = generate_world(&WorldConfig {
        seed: 1,
        n_keyframes: 12,
        n_static_landmarks: 300,
        ..WorldConfig::default()
    })
    .unwrap();
    let (repro, full) = observability_graphs(&world, &PipelineConfig::default());
    let h = 1e-3;
    let fd_curvature = |g: &metric_slam::FactorGraph| {
        let all = [FactorKind::Reprojection, FactorKind::RayDistance];
        (cost_along_scale(g, &all, 1.0 + h) - 2.0 * cost_along_scale(g, &all, 1.0) + cost_along_scale(g, &all, 1.0 - h))
            / (h * h)
    };
    // first ray whose camera is away from the gauge camera
    let c0 = repro.poses[repro.gauge].pose.camera_center();
    let ray = full
        .factors
        .iter()
        .find(|f| {
            f.kind() == FactorKind::RayDistance && (full.poses[f.pose_ids[0]].pose.camera_center() - c0).norm() > 1e-6
        })
        .cloned()
        .unwrap();
    let mut one_ray = repro.clone();
    one_ray.add_factor(ray);
    let base = fd_curvature(&repro);
    let trace = scale_direction_derivative(&one_ray).hessian_trace_per_dim;
    let lifted = fd_curvature(&one_ray);
    let lifted_ok = lifted > 1e-4 * trace;

    let mut scaled = full.clone();
    scaled.scale_about_gauge(2.0);
    let solved = solve(&mut scaled, &SolveOptions::default()).is_ok();
    let poses: Vec<Pose> = scaled.poses.iter().map(|p| p.pose).collect();
    let ratio = trajectory_extent(&poses) / trajectory_extent(&world.poses);
    let recovered = solved && (ratio - 1.0).abs() < 0.01;
    check(
        lifted_ok && recovered,
        format!(
            "curvature along scale {base:.2e} -> {lifted:.2e} with one ray (threshold {:.2e}); 2x map scaling solved back to {ratio:.5} of truth",
            1e-4 * trace
        ),
    )
}

fn gradient_correctness() -> Check {
    let k = CameraIntrinsics::default();
    let mut r = rng(2024);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for _ in 0..100 {
        for case in random_factor_cases(&mut r, &k) {
            let e = jacobian_fd_error(&case, &k);
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some((_, w)) => *w = w.max(e),
                None => worst.push((case.name, e)),
            }
        }
    }
    let pass = worst.iter().all(|(_, e)| *e < 1e-5);
    let text: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(pass, format!("worst relative error over 100 configurations: {}", text.join(", ")))
}

fn scale_filter() -> Check {
    let config = bundled_config("scale_drift");
    let world = generate_world(&config.world).unwrap();
    let published = filter_with_true_depths(&world, &config.pipeline.gate, config.pipeline.process_noise_q);
    let worst = published
        .iter()
        .enumerate()
        .skip(10)
        .map(|(t, s)| (s / world.prior_scale(t) - 1.0).abs())
        .fold(0.0, f64::max);

    let mut r = rng(99);
    let mut all_positive = true;
    for _ in 0..10_000 {
        let mut b = ScaleBelief::new(r.random_range(-20.0..20.0), r.random_range(1e-9..1e6), 0);
        for _ in 0..r.random_range(1..50) {
            b = kalman_predict(&b, r.random_range(0.0..1.0));
            let variance = 10f64.powf(r.random_range(-12.0..6.0));
            let obs = ScaleObservation {
                log_scale: r.random_range(-50.0..50.0),
                variance,
                n_effective: 1.0 / variance,
            };
            b = kalman_update(&b, &obs);
            all_positive &= b.scale() > 0.0 && b.scale().is_finite() && b.variance > 0.0;
        }
    }
    check(
        worst < 0.03 && all_positive,
        format!(
            "sigma_walk {} over {} keyframes: worst error vs hidden prior scale after burn-in {:.2}% (< 3%); positive over 10^4 random sequences: {all_positive}",
            config.world.prior_scale_walk_sigma,
            world.poses.len(),
            worst * 100.0
        ),
    )
}

fn gating_direction() -> Check {
    let mut config = bundled_config("dynamic_30pct");
    config.eval.write_cloud = false;
    let no_dsug = Ablation::from_flags(&["no_dsug"]).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=10 {
        let c = seeded(&config, seed);
        let world = generate_world(&c.world).unwrap();
        let se3 = |a: Ablation| -> f64 {
            execute_on(&c, a, &world)
                .map(|o| o.alignment(AlignMode::Se3).unwrap().ate_rmse)
                .unwrap_or(f64::INFINITY)
        };
        let (full, ablated) = (se3(Ablation::default()), se3(no_dsug));
        wins += usize::from(full < ablated);
        rows.push(format!("{full:.4}/{ablated:.4}"));
    }
    check(
        wins >= 9,
        format!("SE(3) ATE full < no_dsug in {wins}/10 seeds (full/no_dsug m: {})", rows.join(" ")),
    )
}

fn ablation_direction() -> Check {
    let config = bundled_config("scale_drift");
    let world = generate_world(&config.world).unwrap();
    let no_ray = Ablation::from_flags(&["no_ray_factor"]).unwrap();
    let full = execute_on(&config, Ablation::default(), &world).unwrap();
    let variant = execute_on(&config, no_ray, &world).unwrap();
    let f = full.alignment(AlignMode::Sim3).unwrap();
    let v = variant.alignment(AlignMode::Sim3).unwrap();
    let ratio = v.scale_error_pct() / f.scale_error_pct();
    check(
        v.ate_rmse.is_finite() && ratio >= 10.0,
        format!(
            "sim3 scale error full {:.2}% vs no_ray_factor {:.2}% ({ratio:.1}x, need >= 10x); no_ray_factor sim3 ATE {:.3} m",
            f.scale_error_pct(),
            v.scale_error_pct(),
            v.ate_rmse
        ),
    )
}

fn loop_closure() -> Check {
    let mut config = bundled_config("line_with_return");
    config.eval.write_cloud = false;
    let mut improved = 0;
    let mut false_accepts = 0;
    let mut planted = 0;
    let mut max_inliers = 0;
    for seed in 1..=10 {
        let c = seeded(&config, seed);
        let world = generate_world(&c.world).unwrap();
        if let Ok(o) = execute_on(&c, Ablation::default(), &world) {
            let pre = o.pre_loop_alignment(AlignMode::Se3).unwrap().ate_rmse;
            let post = o.alignment(AlignMode::Se3).unwrap().ate_rmse;
            improved += usize::from(o.loop_closed && post < pre);
        }
        let mut other = c.world.clone();
        other.seed = seed + 1000;
        let decoy = generate_world(&other).unwrap();
        for l in planted_negative_loops(&world, &decoy, 5, &c.loop_closure) {
            planted += 1;
            false_accepts += usize::from(l.accepted);
            max_inliers = max_inliers.max(l.inliers);
        }
    }
    check(
        improved >= 9 && false_accepts == 0 && planted == 50,
        format!(
            "SE(3) ATE reduced after a verified loop in {improved}/10 seeds; {false_accepts}/{planted} planted negatives accepted (max {max_inliers} inliers, threshold {})",
            config.loop_closure.min_inliers
        ),
    )
}

fn alignment_oracle() -> Check {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let est: Vec<Vec3> = (0..30).map(|_| random_vec3(&mut r, 3.0)).collect();
        let s = r.random_range(0.2..5.0);
        let rot = random_rotation(&mut r, 3.0).to_rotation_matrix().into_inner();
        let t = random_vec3(&mut r, 10.0);
        let gt: Vec<Vec3> = est.iter().map(|p| rot * p * s + t).collect();
        let a = align_points(&est, &gt, AlignMode::Sim3).unwrap();
        worst = worst
            .max((a.scale - s).abs())
            .max((a.rotation - rot).abs().max())
            .max((a.translation - t).abs().max());
    }
    let mut violations = 0;
    for _ in 0..1000 {
        let n = r.random_range(4..40);
        let gt: Vec<Vec3> = (0..n).map(|_| random_vec3(&mut r, 2.0)).collect();
        let s = r.random_range(0.3..3.0);
        let rot = random_rotation(&mut r, 3.0);
        let est: Vec<Vec3> = gt.iter().map(|g| rot * g * s + random_vec3(&mut r, 0.2)).collect();
        let sim = align_points(&est, &gt, AlignMode::Sim3).unwrap();
        let se = align_points(&est, &gt, AlignMode::Se3).unwrap();
        violations += usize::from(sim.ate_rmse > se.ate_rmse + 1e-12);
    }
    check(
        worst < 1e-9 && violations == 0,
        format!("planted similarity recovered to {worst:.1e}; sim3 ATE > se3 ATE in {violations}/1000 pairs"),
    )
}

fn metric_fidelity() -> Check {
    let config = bundled_config("default_noisy");
    let world = generate_world(&config.world).unwrap();
    let o = execute_on(&config, Ablation::default(), &world).unwrap();
    let s = o.alignment(AlignMode::Sim3).unwrap().scale;
    check((s - 1.0).abs() < 0.03, format!("sim3 scale {s:.4} (|s - 1| < 3%)"))
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let mut compared = 0;
    let mut differing = Vec::new();
    for name in bundled_config_names() {
        let config = bundled_config(&name);
        let world = generate_world(&config.world).unwrap();
        for run in ["a", "b"] {
            let outcome = execute_on(&config, config.ablation().unwrap(), &world).unwrap();
            write_outputs(&outcome, &tmp.path().join(run).join(&name)).unwrap();
            let report = observability_report(&config).unwrap();
            fs::write(tmp.path().join(run).join(&name).join("observability.txt"), report.text).unwrap();
        }
        for entry in fs::read_dir(tmp.path().join("a").join(&name)).unwrap() {
            let file = entry.unwrap().file_name();
            let a = fs::read(tmp.path().join("a").join(&name).join(&file)).unwrap();
            let b = fs::read(tmp.path().join("b").join(&name).join(&file));
            compared += 1;
            if b.ok() != Some(a) {
                differing.push(format!("{name}/{}", file.to_string_lossy()));
            }
        }
    }
    check(
        differing.is_empty() && compared > 0,
        format!(
            "{compared} files from {} bundled configs compared, {} differ {:?}",
            bundled_config_names().len(),
            differing.len(),
            differing
        ),
    )
}

type Criterion = (&'static str, Option<Duration>, fn() -> Check);

fn main() {
    let criteria: [Criterion; 10] = [
        ("scale null-space of reprojection", Some(Duration::from_secs(1)), scale_null_space),
        ("ray factors make scale identifiable", Some(Duration::from_secs(5)), fisher_identifiability),
        ("factor Jacobians match finite differences", Some(Duration::from_secs(5)), gradient_correctness),
        ("scale filter tracking and positivity", Some(Duration::from_secs(5)), scale_filter),
        ("uncertainty gate improves dynamic scenes", Some(Duration::from_secs(60)), gating_direction),
        ("ray ablation degrades scale", Some(Duration::from_secs(60)), ablation_direction),
        ("loop closure reduces drift", Some(Duration::from_secs(60)), loop_closure),
        ("trajectory alignment oracle", Some(Duration::from_secs(5)), alignment_oracle),
        ("end-to-end metric fidelity", Some(Duration::from_secs(30)), metric_fidelity),
        ("deterministic outputs", None, determinism),
    ];
    let mut failed = 0;
    for (i, (title, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            check(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let pass = result.pass && in_time;
        failed += usize::from(!pass);
        let timing = match budget {
            Some(b) => format!("{:.2}s of {}s", elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.2}s", elapsed.as_secs_f64()),
        };
        println!(
            "criterion {:>2} {}: {title}: {} [{timing}{}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
