use nalgebra::{DMatrix, DVector, Matrix3, Matrix6x3, SMatrix, SVector, Vector3};

use super::FactorGraph;
use crate::error::{Error, Result};
use crate::factors::{huber_weight, Factor, FactorKind, LinearizationSink};
use crate::geometry::{Pose, Vec6};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
    /// Stop when the cost itself drops below this value.
    pub abs_tol: f64,
    /// Initial damping as a fraction of the mean Hessian diagonal.
    pub initial_damping: f64,
    pub max_damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_tol: 1e-10,
            abs_tol: 1e-20,
            initial_damping: 1e-4,
            max_damping: 1e8,
        }
    }
}

/// One evaluated Levenberg-Marquardt trial step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialStep {
    pub damping: f64,
    pub cost_before: f64,
    pub cost_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Factors skipped at the final state because a point was behind a camera.
    pub inactive_factors: usize,
    pub damping: f64,
    /// Every trial step in order.
    pub trials: Vec<TrialStep>,
}

/// Solves over every factor with the graph's own fixed flags.
pub fn solve(graph: &mut FactorGraph, options: &SolveOptions) -> Result<SolveReport> {
    let factors: Vec<usize> = (0..graph.factors.len()).collect();
    let pose_free: Vec<bool> = (0..graph.poses.len()).map(|i| graph.pose_is_free(i)).collect();
    let lm_free: Vec<bool> = graph.landmarks.iter().map(|l| !l.fixed).collect();
    solve_subset(graph, &factors, &pose_free, &lm_free, options)
}

struct Layout {
    pose_block: Vec<Option<usize>>,
    lm_index: Vec<Option<usize>>,
    n_pose_blocks: usize,
    n_lms: usize,
}

struct NormalEquations {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<Matrix3<f64>>,
    gl: Vec<Vector3<f64>>,
    hpl: Vec<Vec<(usize, Matrix6x3<f64>)>>,
    inactive: usize,
}

fn build_layout(graph: &FactorGraph, pose_free: &[bool], lm_free: &[bool]) -> Layout {
    let mut pose_block = vec![None; graph.poses.len()];
    let mut n = 0;
    for (i, slot) in pose_block.iter_mut().enumerate() {
        if pose_free[i] && i != graph.gauge {
            *slot = Some(n);
            n += 1;
        }
    }
    let mut lm_index = vec![None; graph.landmarks.len()];
    let mut m = 0;
    for (j, slot) in lm_index.iter_mut().enumerate() {
        if lm_free[j] {
            *slot = Some(m);
            m += 1;
        }
    }
    Layout {
        pose_block,
        lm_index,
        n_pose_blocks: n,
        n_lms: m,
    }
}

fn linearize_all(graph: &FactorGraph, factors: &[usize], layout: &Layout) -> NormalEquations {
    let np = layout.n_pose_blocks;
    let mut eq = NormalEquations {
        hpp: DMatrix::zeros(6 * np, 6 * np),
        gp: DVector::zeros(6 * np),
        hll: vec![Matrix3::zeros(); layout.n_lms],
        gl: vec![Vector3::zeros(); layout.n_lms],
        hpl: vec![Vec::new(); layout.n_lms],
        inactive: 0,
    };
    let mut poses: Vec<Pose> = Vec::with_capacity(2);
    for &fi in factors {
        let f = &graph.factors[fi];
        poses.clear();
        poses.extend(f.pose_ids.iter().map(|&p| graph.poses[p].pose));
        let lm_value = f.landmark_id.map(|l| graph.landmarks[l].position);
        let mut sink = NormalSink {
            eq: &mut eq,
            information: f.information,
            robust_delta: f.robust_delta,
            blocks: [0, 1].map(|k| f.pose_ids.get(k).and_then(|&p| layout.pose_block[p])),
            landmark: f.landmark_id.and_then(|l| layout.lm_index[l]),
            active: false,
        };
        f.linearize_into(&poses, lm_value.as_ref(), &graph.intrinsics, &mut sink);
        if !sink.active {
            eq.inactive += 1;
        }
    }
    eq
}

/// Accumulates one factor into the normal equations.
struct NormalSink<'a> {
    eq: &'a mut NormalEquations,
    information: f64,
    robust_delta: f64,
    blocks: [Option<usize>; 2],
    landmark: Option<usize>,
    active: bool,
}

impl LinearizationSink for NormalSink<'_> {
    fn accept<const R: usize>(
        &mut self,
        r: &SVector<f64, R>,
        jac_poses: [Option<&SMatrix<f64, R, 6>>; 2],
        jac_landmark: Option<&SMatrix<f64, R, 3>>,
    ) {
        self.active = true;
        let s = self.information * huber_weight(r.norm(), self.robust_delta);
        if s == 0.0 {
            return;
        }
        let eq = &mut *self.eq;
        let mut blocks: [Option<(usize, &SMatrix<f64, R, 6>)>; 2] = [None, None];
        for k in 0..2 {
            blocks[k] = self.blocks[k].zip(jac_poses[k]);
        }
        for &(a, ja) in blocks.iter().flatten() {
            let mut ga = eq.gp.fixed_rows_mut::<6>(6 * a);
            ga += ja.tr_mul(r) * s;
            for &(b, jb) in blocks.iter().flatten() {
                let mut hab = eq.hpp.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                hab += ja.tr_mul(jb) * s;
            }
        }
        if let Some((l, jl)) = self.landmark.zip(jac_landmark) {
            eq.hll[l] += jl.tr_mul(jl) * s;
            eq.gl[l] += jl.tr_mul(r) * s;
            for &(a, ja) in blocks.iter().flatten() {
                let hal = ja.tr_mul(jl) * s;
                match eq.hpl[l].iter_mut().find(|(b, _)| *b == a) {
                    Some((_, m)) => *m += hal,
                    None => eq.hpl[l].push((a, hal)),
                }
            }
        }
    }
}

/// Damped step via the Schur complement. `None` if the system is singular.
fn damped_step(eq: &NormalEquations, lambda: f64) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let n = eq.gp.len();
    let mut s = eq.hpp.clone();
    for i in 0..n {
        s[(i, i)] += lambda;
    }
    let mut b = -eq.gp.clone();
    let mut hll_inv = Vec::with_capacity(eq.hll.len());
    for (l, hll) in eq.hll.iter().enumerate() {
        let inv = (hll + Matrix3::identity() * lambda).try_inverse()?;
        let gl = eq.gl[l];
        let row = &eq.hpl[l];
        let t: Vec<Matrix6x3<f64>> = row.iter().map(|(_, hal)| hal * inv).collect();
        for (k, (a, _)) in row.iter().enumerate() {
            let mut ba = b.rows_mut(6 * a, 6);
            ba += t[k] * gl;
            for (c, hcl) in row {
                let mut sac = s.view_mut((6 * a, 6 * c), (6, 6));
                sac -= t[k] * hcl.transpose();
            }
        }
        hll_inv.push(inv);
    }
    let dp = if n > 0 {
        let chol = s.cholesky()?;
        chol.solve(&b)
    } else {
        DVector::zeros(0)
    };
    if dp.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let dl = eq
        .hll
        .iter()
        .enumerate()
        .map(|(l, _)| {
            let mut rhs = -eq.gl[l];
            for (a, hal) in &eq.hpl[l] {
                let dpa = Vec6::from_iterator(dp.rows(6 * a, 6).iter().copied());
                rhs -= hal.transpose() * dpa;
            }
            hll_inv[l] * rhs
        })
        .collect();
    Some((dp, dl))
}

fn mean_diagonal(eq: &NormalEquations) -> f64 {
    let mut sum = eq.hpp.diagonal().sum();
    let mut n = eq.gp.len();
    for h in &eq.hll {
        sum += h.trace();
        n += 3;
    }
    if n == 0 || !(sum > 0.0) {
        1.0
    } else {
        sum / n as f64
    }
}

fn apply_step(graph: &mut FactorGraph, layout: &Layout, dp: &DVector<f64>, dl: &[Vector3<f64>]) {
    for (i, block) in layout.pose_block.iter().enumerate() {
        if let Some(a) = block {
            let d = Vec6::from_iterator(dp.rows(6 * a, 6).iter().copied());
            graph.poses[i].pose = graph.poses[i].pose.retract(&d);
        }
    }
    for (j, idx) in layout.lm_index.iter().enumerate() {
        if let Some(l) = idx {
            graph.landmarks[j].position += dl[*l];
        }
    }
}

fn step_is_negligible(graph: &FactorGraph, layout: &Layout, dp: &DVector<f64>, dl: &[Vector3<f64>]) -> bool {
    let step = (dp.norm_squared() + dl.iter().map(|d| d.norm_squared()).sum::<f64>()).sqrt();
    let mut state = 0.0;
    for (i, block) in layout.pose_block.iter().enumerate() {
        if block.is_some() {
            state += graph.poses[i].pose.translation.norm_squared();
        }
    }
    for (j, idx) in layout.lm_index.iter().enumerate() {
        if idx.is_some() {
            state += graph.landmarks[j].position.norm_squared();
        }
    }
    step <= 1e-12 * (state.sqrt() + 1e-12)
}

/// Levenberg–Marquardt over a subset of factors and variables.
///
/// Variables not marked free, and the gauge pose, keep their values.
/// Points behind a camera deactivate their factor for that linearization.
pub fn solve_subset(
    graph: &mut FactorGraph,
    factors: &[usize],
    pose_free: &[bool],
    lm_free: &[bool],
    options: &SolveOptions,
) -> Result<SolveReport> {
    graph.validate()?;
    if pose_free.len() != graph.poses.len() || lm_free.len() != graph.landmarks.len() {
        return Err(Error::InvalidInput("free masks do not match the graph".into()));
    }
    let layout = build_layout(graph, pose_free, lm_free);
    let mut cost = graph.cost_of(factors.iter().copied());
    if !cost.is_finite() {
        return Err(Error::SolverFailure(format!("initial cost is not finite: {cost}")));
    }
    let initial_cost = cost;
    let mut lambda: Option<f64> = None;
    let mut lambda_min = 0.0;
    let mut iterations = 0;
    let mut converged = cost <= options.abs_tol;
    let mut inactive = 0;
    let mut trials = Vec::new();

    while !converged && iterations < options.max_iterations {
        iterations += 1;
        let eq = linearize_all(graph, factors, &layout);
        inactive = eq.inactive;
        let lam = lambda.get_or_insert_with(|| {
            let m = mean_diagonal(&eq);
            lambda_min = 1e-12 * m;
            options.initial_damping * m
        });
        loop {
            let Some((dp, dl)) = damped_step(&eq, *lam) else {
                *lam *= 10.0;
                if *lam > options.max_damping {
                    return Err(Error::SolverFailure(format!(
                        "normal equations singular at damping {lam:e}"
                    )));
                }
                continue;
            };
            if step_is_negligible(graph, &layout, &dp, &dl) {
                converged = true;
                break;
            }
            let saved = (graph.poses.clone(), graph.landmarks.clone());
            apply_step(graph, &layout, &dp, &dl);
            let new_cost = graph.cost_of(factors.iter().copied());
            let accepted = new_cost.is_finite() && new_cost < cost;
            trials.push(TrialStep {
                damping: *lam,
                cost_before: cost,
                cost_after: new_cost,
                accepted,
            });
            if accepted {
                let rel = (cost - new_cost) / cost;
                cost = new_cost;
                *lam = (*lam * 0.5).max(lambda_min);
                converged = rel < options.rel_tol || cost <= options.abs_tol;
                break;
            }
            (graph.poses, graph.landmarks) = saved;
            *lam *= 10.0;
            if *lam > options.max_damping {
                // no descent possible: at a minimum up to numerical precision
                converged = true;
                break;
            }
        }
    }
    Ok(SolveReport {
        iterations,
        initial_cost,
        final_cost: cost,
        converged,
        inactive_factors: inactive,
        damping: lambda.unwrap_or(0.0),
        trials,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOptions {
    /// Poses optimized; every other pose is held fixed.
    pub window: Vec<usize>,
    /// Factor kinds included in the window cost.
    pub kinds: Vec<FactorKind>,
    pub solve: SolveOptions,
    /// When set, rays of the window poses are re-anchored afterwards with
    /// this metric correction, applied about the first window camera.
    pub reanchor_scale: Option<f64>,
    /// Keep factors from poses outside the window that observe free
    /// landmarks. When false the window is self-contained and its first
    /// pose is held fixed instead.
    pub outside_observations: bool,
}

/// Sliding-window bundle adjustment. Landmarks touched by a window pose are
/// free. Factors on free variables are included, so older keyframes that
/// observe a free landmark still constrain it unless
/// `outside_observations` is off.
pub fn window_ba(graph: &mut FactorGraph, options: &WindowOptions) -> Result<SolveReport> {
    let mut pose_free = vec![false; graph.poses.len()];
    for &p in &options.window {
        if p < graph.poses.len() && !graph.poses[p].fixed && p != graph.gauge {
            pose_free[p] = true;
        }
    }
    if !options.outside_observations {
        if let Some(&first) = options.window.first() {
            pose_free[first] = false;
        }
    }
    let in_window = |f: &Factor| f.pose_ids.iter().all(|p| options.window.contains(p));
    let mut lm_free = vec![false; graph.landmarks.len()];
    for f in &graph.factors {
        if !options.kinds.contains(&f.kind()) {
            continue;
        }
        if let Some(l) = f.landmark_id {
            if f.pose_ids.iter().any(|p| options.window.contains(p)) && !graph.landmarks[l].fixed {
                lm_free[l] = true;
            }
        }
    }
    let factors: Vec<usize> = graph
        .factors
        .iter()
        .enumerate()
        .filter(|(_, f)| options.kinds.contains(&f.kind()))
        .filter(|(_, f)| options.outside_observations || in_window(f))
        .filter(|(_, f)| {
            f.landmark_id.is_some_and(|l| lm_free[l]) || f.pose_ids.iter().any(|&p| pose_free[p])
        })
        .map(|(i, _)| i)
        .collect();
    let report = solve_subset(graph, &factors, &pose_free, &lm_free, &options.solve)?;
    if let (Some(s), Some(&first)) = (options.reanchor_scale, options.window.first()) {
        let center = graph.poses[first].pose.camera_center();
        graph.reanchor_rays(&options.window, s, &center);
    }
    Ok(report)
}
