//! Experiment configuration and the end-to-end runs behind the command
//! line: simulate, track, close loops, evaluate and write artifacts.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{align, chamfer_fscore, write_metrics_csv, AlignMode, AlignmentResult, MetricsRow};
use crate::factors::{Factor, FactorKind};
use crate::geometry::{plucker_from_camera, Pose};
use crate::io::{write_ply, write_tum};
use crate::loops::{metric_global_ba, retrieve_loops, verify_loop, write_loops_csv, LoopCandidate, LoopParams};
use crate::optimizer::{scale_direction_derivative, write_graph, FactorGraph, ScaleDirectionReport, SolveOptions};
use crate::pipeline::{fuse_point_cloud, run_pipeline, Ablation, ColoredPoint, PipelineConfig, PipelineState};
use crate::sim::{generate_world, World, WorldConfig};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "METRIC_SLAM_OUTPUT_DIR";

/// Threshold separating a flat from an observable scale direction.
pub const OBSERVABILITY_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<AlignMode>,
    /// Fuse and write the dense point cloud when the world has samples.
    pub write_cloud: bool,
    /// F-score distance threshold, meters.
    pub fscore_tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: vec![AlignMode::Sim3, AlignMode::Se3],
            write_cloud: true,
            fscore_tau: 0.05,
        }
    }
}

fn default_name() -> String {
    "sequence".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub config_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Components to disable, see [`Ablation::FLAGS`].
    #[serde(default)]
    pub ablation: Vec<String>,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default, rename = "loop")]
    pub loop_closure: LoopParams,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn as_config_error(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidInput(m) | Error::Config(m) => Error::Config(format!("[{section}] {m}")),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported, expected {CONFIG_VERSION}",
                self.config_version
            )));
        }
        if self.name.is_empty() || self.name.contains([',', '\n']) {
            return Err(Error::Config("name must be non-empty without commas or newlines".into()));
        }
        self.world.validate().map_err(|e| as_config_error("world", e))?;
        self.pipeline.validate().map_err(|e| as_config_error("pipeline", e))?;
        self.loop_closure.validate().map_err(|e| as_config_error("loop", e))?;
        if self.eval.modes.is_empty() || !(self.eval.fscore_tau >= 0.0) {
            return Err(Error::Config("[eval] needs at least one mode and fscore_tau >= 0".into()));
        }
        self.ablation()?;
        Ok(())
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::from_flags(&self.ablation)
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

/// Everything computed by one run, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub name: String,
    pub ablation: Ablation,
    pub state: PipelineState,
    pub ground_truth: Vec<Pose>,
    /// Trajectory before the loop-aware global solve.
    pub pre_loop_poses: Vec<Pose>,
    /// Verified loop candidates, accepted or not.
    pub loops: Vec<LoopCandidate>,
    pub loop_closed: bool,
    pub alignments: Vec<AlignmentResult>,
    pub pre_loop_alignments: Vec<AlignmentResult>,
    pub cloud: Vec<ColoredPoint>,
    /// Chamfer distance and F-score against the static surface samples.
    pub cloud_metrics: Option<(f64, f64)>,
}

impl RunOutcome {
    pub fn alignment(&self, mode: AlignMode) -> Option<&AlignmentResult> {
        self.alignments.iter().find(|a| a.mode == mode)
    }

    pub fn pre_loop_alignment(&self, mode: AlignMode) -> Option<&AlignmentResult> {
        self.pre_loop_alignments.iter().find(|a| a.mode == mode)
    }

    pub fn estimated_poses(&self) -> Vec<Pose> {
        self.state.estimated_poses()
    }

    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        let mut rows: Vec<MetricsRow> = self.alignments.iter().map(|a| MetricsRow::new(&self.name, a)).collect();
        if self.loop_closed {
            let pre = format!("{}_pre_loop", self.name);
            rows.extend(self.pre_loop_alignments.iter().map(|a| MetricsRow::new(&pre, a)));
        }
        rows
    }

    /// Sim(3) / SE(3) pairs per sequence.
    pub fn summary_table(&self) -> String {
        summary_table(&[(self.name.clone(), self)])
    }

    /// Which code paths ran, with counts, plus a few run statistics.
    pub fn run_report(&self) -> String {
        let s = &self.state;
        let p = &s.paths;
        let flags = self.ablation.active_flags();
        let mut out = String::new();
        let _ = writeln!(out, "name {}", self.name);
        let _ = writeln!(out, "ablation {}", if flags.is_empty() { "none".into() } else { flags.join(",") });
        let onoff = |n: usize| if n > 0 { "on" } else { "off" };
        let _ = writeln!(out, "feature ray_factor {} ({} factors)", onoff(p.ray_factors), p.ray_factors);
        let _ = writeln!(out, "feature uncertainty_gate {} ({} gate evaluations)", onoff(p.gated_keyframes), p.gated_keyframes);
        let _ = writeln!(out, "feature kalman_filter {} ({} updates)", onoff(p.kalman_updates), p.kalman_updates);
        let _ = writeln!(
            out,
            "feature weighted_scale {} ({} estimates)",
            onoff(p.weighted_estimates),
            p.weighted_estimates
        );
        let _ = writeln!(out, "keyframes {}", s.keyframes.len());
        let _ = writeln!(out, "init_window {}", s.init_window);
        let _ = writeln!(out, "landmarks {}", s.graph.landmarks.len());
        for kind in [
            FactorKind::Reprojection,
            FactorKind::RayDistance,
            FactorKind::DepthPrior,
            FactorKind::RelativePose,
        ] {
            let _ = writeln!(out, "factors {} {}", kind.name(), s.graph.count_kind(kind));
        }
        let _ = writeln!(out, "final_scale {:.6}", s.scale.scale());
        let _ = writeln!(out, "scale_correction {:.6}", s.scale_correction());
        let accepted = self.loops.iter().filter(|l| l.accepted).count();
        let _ = writeln!(out, "loops verified {} accepted {}", self.loops.len(), accepted);
        let _ = writeln!(out, "cloud_points {}", self.cloud.len());
        if let Some((c, f)) = self.cloud_metrics {
            let _ = writeln!(out, "cloud_chamfer_m {c:.6}");
            let _ = writeln!(out, "cloud_fscore {f:.6}");
        }
        out
    }
}

/// Formats Sim(3) / SE(3) ATE pairs for several runs.
pub fn summary_table(runs: &[(String, &RunOutcome)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>22} {:>10} {:>10}",
        "sequence", "ATE m (Sim3 / SE3)", "scale", "err %"
    );
    let mut row = |label: &str, sim: Option<&AlignmentResult>, se: Option<&AlignmentResult>| {
        let fmt = |a: Option<&AlignmentResult>| a.map_or("-".to_string(), |a| format!("{:.4}", a.ate_rmse));
        let (scale, err) = sim.map_or(("-".into(), "-".into()), |a| {
            (format!("{:.4}", a.scale), format!("{:.2}", a.scale_error_pct()))
        });
        let _ = writeln!(
            out,
            "{:<28} {:>22} {:>10} {:>10}",
            label,
            format!("{} / {}", fmt(sim), fmt(se)),
            scale,
            err
        );
    };
    for (label, r) in runs {
        if r.loop_closed {
            row(
                &format!("{label} (pre-loop)"),
                r.pre_loop_alignment(AlignMode::Sim3),
                r.pre_loop_alignment(AlignMode::Se3),
            );
        }
        row(label, r.alignment(AlignMode::Sim3), r.alignment(AlignMode::Se3));
    }
    out
}

fn align_all(est: &[Pose], gt: &[Pose], modes: &[AlignMode]) -> Result<Vec<AlignmentResult>> {
    modes.iter().map(|&m| align(est, gt, m)).collect()
}

/// Verifies retrieved candidates, best first, up to the configured count.
pub fn detect_loops(state: &PipelineState, params: &LoopParams) -> Vec<LoopCandidate> {
    let candidates = retrieve_loops(&state.descriptors(), params.sim_threshold, params.min_temporal_gap);
    let k = state.graph.intrinsics;
    candidates
        .iter()
        .take(params.max_candidates)
        .map(|c| {
            verify_loop(
                c,
                &state.keyframes[c.query_id].tracks,
                &state.keyframes[c.match_id].tracks,
                &k,
                params,
            )
        })
        .collect()
}

/// Simulates the configured world and runs the whole system on it.
pub fn execute(config: &ExperimentConfig, ablation: Ablation) -> Result<RunOutcome> {
    let world = generate_world(&config.world).map_err(|e| as_config_error("world", e))?;
    execute_on(config, ablation, &world)
}

/// Runs the whole system on an existing world.
pub fn execute_on(config: &ExperimentConfig, ablation: Ablation, world: &World) -> Result<RunOutcome> {
    let mut state = run_pipeline(&world.observations, world.intrinsics(), &config.pipeline, ablation)?;
    let pre_loop_poses = state.estimated_poses();
    let ground_truth = world.poses.clone();
    let pre_loop_alignments = align_all(&pre_loop_poses, &ground_truth, &config.eval.modes)?;

    let mut loops = Vec::new();
    let mut loop_closed = false;
    if config.loop_closure.enabled {
        loops = detect_loops(&state, &config.loop_closure);
        if loops.iter().any(|l| l.accepted) {
            let opts = SolveOptions {
                max_iterations: 30,
                ..SolveOptions::default()
            };
            metric_global_ba(&mut state.graph, &loops, &config.loop_closure, &opts)?;
            loop_closed = true;
        }
    }
    let alignments = if loop_closed {
        align_all(&state.estimated_poses(), &ground_truth, &config.eval.modes)?
    } else {
        pre_loop_alignments.clone()
    };

    let mut cloud = Vec::new();
    let mut cloud_metrics = None;
    if config.eval.write_cloud && !world.dense_frames.iter().all(|f| f.samples.is_empty()) {
        cloud = fuse_point_cloud(&state, &world.dense_frames)?;
        if !cloud.is_empty() && !world.dense_static_points.is_empty() {
            // evaluate in the ground-truth frame through the sim3 alignment
            let sim = align(&state.estimated_poses(), &ground_truth, AlignMode::Sim3)?;
            let pts: Vec<_> = cloud.iter().map(|p| sim.apply(&p.position)).collect();
            cloud_metrics = Some(chamfer_fscore(&pts, &world.dense_static_points, config.eval.fscore_tau)?);
        }
    }

    Ok(RunOutcome {
        name: config.name.clone(),
        ablation,
        state,
        ground_truth,
        pre_loop_poses,
        loops,
        loop_closed,
        alignments,
        pre_loop_alignments,
        cloud,
        cloud_metrics,
    })
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Writes every artifact of `outcome` into `dir` and returns the paths.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let stamps: Vec<f64> = (0..outcome.ground_truth.len()).map(|k| k as f64).collect();
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, f)?;
        written.push(path);
        Ok(())
    };
    let est = outcome.estimated_poses();
    emit("trajectory_estimate.tum", &|b| write_tum(b, &stamps, &est))?;
    emit("trajectory_ground_truth.tum", &|b| write_tum(b, &stamps, &outcome.ground_truth))?;
    if outcome.loop_closed {
        emit("trajectory_pre_loop.tum", &|b| write_tum(b, &stamps, &outcome.pre_loop_poses))?;
    }
    emit("metrics.csv", &|b| write_metrics_csv(b, &outcome.metrics_rows()))?;
    emit("loops.csv", &|b| write_loops_csv(b, &outcome.loops))?;
    if !outcome.cloud.is_empty() {
        emit("cloud.ply", &|b| write_ply(b, &outcome.cloud))?;
    }
    emit("graph.txt", &|b| b.write_all(write_graph(&outcome.state.graph).as_bytes()))?;
    emit("run_report.txt", &|b| b.write_all(outcome.run_report().as_bytes()))?;
    emit("summary.txt", &|b| b.write_all(outcome.summary_table().as_bytes()))?;
    Ok(written)
}

/// `run`: executes the configured experiment and writes its artifacts.
pub fn run(config: &ExperimentConfig) -> Result<(RunOutcome, PathBuf)> {
    let outcome = execute(config, config.ablation()?)?;
    let dir = config.resolved_output_dir();
    write_outputs(&outcome, &dir)?;
    Ok((outcome, dir))
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub baseline: RunOutcome,
    pub variant: RunOutcome,
    pub variant_label: String,
    pub table: String,
}

/// `ablate`: runs the configured system and the same system with `flags`
/// additionally disabled on one shared world, writing both.
pub fn ablate(config: &ExperimentConfig, flags: &[String]) -> Result<AblationOutcome> {
    if flags.is_empty() {
        return Err(Error::Config("ablate needs at least one flag to disable".into()));
    }
    let base_ablation = config.ablation()?;
    let mut variant_ablation = base_ablation;
    for f in flags {
        variant_ablation.set(f.trim())?;
    }
    let world = generate_world(&config.world).map_err(|e| as_config_error("world", e))?;
    let baseline = execute_on(config, base_ablation, &world)?;
    let variant = execute_on(config, variant_ablation, &world)?;
    let variant_label = variant_ablation.active_flags().join("+");
    let dir = config.resolved_output_dir();
    write_outputs(&baseline, &dir.join("baseline"))?;
    write_outputs(&variant, &dir.join(&variant_label))?;
    let base_label = format!("{}[baseline]", config.name);
    let var_label = format!("{}[{variant_label}]", config.name);
    let table = summary_table(&[(base_label.clone(), &baseline), (var_label.clone(), &variant)]);
    let mut rows = Vec::new();
    for (label, r) in [(&base_label, &baseline), (&var_label, &variant)] {
        rows.extend(r.alignments.iter().map(|a| MetricsRow::new(label, a)));
    }
    write_file(&dir.join("ablation_metrics.csv"), |b| write_metrics_csv(b, &rows))?;
    write_file(&dir.join("ablation_summary.txt"), |b| b.write_all(table.as_bytes()))?;
    Ok(AblationOutcome {
        baseline,
        variant,
        variant_label,
        table,
    })
}

/// Graphs used by the observability report, built from the ground-truth
/// trajectory and landmarks with the simulated pixel tracks.
pub fn observability_graphs(world: &World, pipeline: &PipelineConfig) -> (FactorGraph, FactorGraph) {
    let k = *world.intrinsics();
    let mut g = FactorGraph::new(k);
    for pose in &world.poses {
        g.add_pose(*pose, false);
    }
    let n_static = world.static_landmarks.len() as u64;
    let mut index = vec![None; world.static_landmarks.len()];
    let info = 1.0 / (pipeline.pixel_sigma * pipeline.pixel_sigma);
    let mut rays = Vec::new();
    for (f, obs) in world.observations.iter().enumerate() {
        for t in obs.tracks.iter().filter(|t| t.landmark_id < n_static) {
            let id = t.landmark_id as usize;
            let l = *index[id]
                .get_or_insert_with(|| g.add_landmark(t.landmark_id, world.static_landmarks[id].position));
            g.add_factor(Factor::reprojection(f, l, t.pixel, info, pipeline.huber_pixel));
            let ray = plucker_from_camera(&world.poses[f], &t.pixel, &k);
            rays.push(Factor::ray(f, l, ray, t.pixel, 1.0 / pipeline.gate.sigma0_sq, pipeline.huber_ray));
        }
    }
    let reprojection_only = g.clone();
    for r in rays {
        g.add_factor(r);
    }
    (reprojection_only, g)
}

#[derive(Debug, Clone)]
pub struct ObservabilityOutcome {
    pub reprojection_only: ScaleDirectionReport,
    pub with_rays: ScaleDirectionReport,
    /// Largest camera distance from the gauge camera, meters.
    pub baseline_m: f64,
    pub text: String,
}

impl ObservabilityOutcome {
    pub fn reprojection_derivative_rel(&self) -> f64 {
        relative_derivative(&self.reprojection_only, FactorKind::Reprojection)
    }

    pub fn ray_curvature_rel(&self) -> f64 {
        self.with_rays.relative_curvature(FactorKind::RayDistance)
    }
}

fn relative_derivative(r: &ScaleDirectionReport, kind: FactorKind) -> f64 {
    let d = r.family(kind).map_or(0.0, |f| f.derivative.abs());
    if r.gradient_norm > 0.0 {
        d / r.gradient_norm
    } else {
        d
    }
}

/// `observability`: derivative and curvature of the cost along the global
/// scale direction, with reprojection factors only and with ray factors.
pub fn observability_report(config: &ExperimentConfig) -> Result<ObservabilityOutcome> {
    let world = generate_world(&config.world).map_err(|e| as_config_error("world", e))?;
    let (repro, full) = observability_graphs(&world, &config.pipeline);
    let a = scale_direction_derivative(&repro);
    let b = scale_direction_derivative(&full);
    let c0 = world.poses[0].camera_center();
    let baseline_m = world
        .poses
        .iter()
        .map(|p| (p.camera_center() - c0).norm())
        .fold(0.0, f64::max);
    let mut text = String::new();
    let _ = writeln!(text, "name {}", config.name);
    let _ = writeln!(
        text,
        "graph keyframes {} landmarks {} baseline_m {:.6}",
        world.poses.len(),
        repro.landmarks.len(),
        baseline_m
    );
    let _ = writeln!(text, "threshold {OBSERVABILITY_THRESHOLD:.1e}");
    for (label, r) in [("reprojection_only", &a), ("with_rays", &b)] {
        let _ = writeln!(
            text,
            "{label} gradient_norm {:.6e} hessian_trace_per_dim {:.6e}",
            r.gradient_norm, r.hessian_trace_per_dim
        );
        for f in r.families.iter().filter(|f| f.n_factors > 0) {
            let rel_d = if r.gradient_norm > 0.0 { f.derivative.abs() / r.gradient_norm } else { f.derivative.abs() };
            let rel_c = if r.hessian_trace_per_dim > 0.0 { f.curvature / r.hessian_trace_per_dim } else { 0.0 };
            let _ = writeln!(
                text,
                "{label} {} factors {} derivative_rel {:.6e} curvature_rel {:.6e}",
                f.kind.name(),
                f.n_factors,
                rel_d,
                rel_c
            );
        }
    }
    let rd = relative_derivative(&a, FactorKind::Reprojection);
    let rc = b.relative_curvature(FactorKind::RayDistance);
    let _ = writeln!(
        text,
        "reprojection_component {}",
        if rd < OBSERVABILITY_THRESHOLD { "flat" } else { "NOT flat" }
    );
    let _ = writeln!(
        text,
        "metric_component {}",
        if rc > OBSERVABILITY_THRESHOLD { "observable" } else { "flat" }
    );
    if baseline_m < 1e-9 {
        let _ = writeln!(
            text,
            "warning: all cameras share one centre; rays pass through it and cannot fix the scale"
        );
    }
    Ok(ObservabilityOutcome {
        reprojection_only: a,
        with_rays: b,
        baseline_m,
        text,
    })
}
