//! Loop retrieval by descriptor similarity, two-view verification with an
//! essential matrix estimated by RANSAC, and the loop-aware global solve.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2, Rotation3, UnitQuaternion, Vector2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::Factor;
use crate::geometry::{skew, CameraIntrinsics, Mat3, Pose, Vec3};
use crate::optimizer::{solve, FactorGraph, SolveOptions, SolveReport};
use crate::sim::Track;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopParams {
    /// Run retrieval, verification and the global solve.
    pub enabled: bool,
    pub sim_threshold: f64,
    pub min_temporal_gap: usize,
    pub ransac_iterations: usize,
    /// Inlier threshold on the Sampson distance, in pixels.
    pub sampson_tol_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
    /// Information of the loop edge residual.
    pub edge_information: f64,
    pub edge_robust_delta: f64,
    /// Upper bound on candidates passed to verification, best first.
    pub max_candidates: usize,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            enabled: true,
            sim_threshold: 0.9,
            min_temporal_gap: 30,
            ransac_iterations: 200,
            sampson_tol_px: 2.0,
            min_inliers: 20,
            seed: 7,
            edge_information: 1e3,
            edge_robust_delta: 0.1,
            max_candidates: 20,
        }
    }
}

impl LoopParams {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.sim_threshold)
            || self.min_temporal_gap == 0
            || self.ransac_iterations == 0
            || !(self.sampson_tol_px > 0.0)
            || self.min_inliers < 8
            || !(self.edge_information >= 0.0)
            || !(self.edge_robust_delta > 0.0)
        {
            return Err(Error::InvalidInput(format!("invalid loop parameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopCandidate {
    pub query_id: usize,
    pub match_id: usize,
    pub cosine_similarity: f64,
    pub inliers: usize,
    /// Maps match-camera coordinates into the query camera; the translation
    /// has unit norm.
    pub relative_pose: Option<Pose>,
    pub accepted: bool,
}

/// All pairs `(i, j)` with `j <= i - min_temporal_gap` and descriptor dot
/// product at least `sim_threshold`, most similar first.
pub fn retrieve_loops(descriptors: &[DVector<f64>], sim_threshold: f64, min_temporal_gap: usize) -> Vec<LoopCandidate> {
    let mut out = Vec::new();
    for i in 0..descriptors.len() {
        for j in 0..=i.saturating_sub(min_temporal_gap) {
            if i < j + min_temporal_gap {
                continue;
            }
            let sim = descriptors[i].dot(&descriptors[j]);
            if sim >= sim_threshold {
                out.push(LoopCandidate {
                    query_id: i,
                    match_id: j,
                    cosine_similarity: sim,
                    inliers: 0,
                    relative_pose: None,
                    accepted: false,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        b.cosine_similarity
            .total_cmp(&a.cosine_similarity)
            .then(a.query_id.cmp(&b.query_id))
            .then(a.match_id.cmp(&b.match_id))
    });
    out
}

/// `E = [t]x R` for a relative pose mapping camera-1 coordinates into
/// camera 2, so that `x2^T E x1 = 0`.
pub fn essential_from_pose(rel: &Pose) -> Mat3 {
    skew(&rel.translation) * rel.rotation_matrix()
}

/// First-order distance of a normalized correspondence `(x1, x2)` to the
/// epipolar geometry of `e`, in normalized image units.
pub fn sampson_error(e: &Mat3, x1: &Vec3, x2: &Vec3) -> f64 {
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

/// Similarity normalization: centroid to the origin, mean distance sqrt(2).
fn normalizing_transform(pts: &[&Vec3]) -> Mat3 {
    let n = pts.len() as f64;
    let c: Vector2<f64> = pts.iter().map(|p| Vector2::new(p.x, p.y)).sum::<Vector2<f64>>() / n;
    let mean_dist = pts.iter().map(|p| (Vector2::new(p.x, p.y) - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Mat3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point estimate of `E` from `idx` correspondences,
/// projected onto the essential manifold.
pub fn eight_point(x1: &[Vec3], x2: &[Vec3], idx: &[usize]) -> Option<Mat3> {
    if idx.len() < 8 {
        return None;
    }
    let t1 = normalizing_transform(&idx.iter().map(|&i| &x1[i]).collect::<Vec<_>>());
    let t2 = normalizing_transform(&idx.iter().map(|&i| &x2[i]).collect::<Vec<_>>());
    let rows = idx.len().max(9);
    let mut a = DMatrix::zeros(rows, 9);
    for (r, &i) in idx.iter().enumerate() {
        let p = t1 * x1[i];
        let q = t2 * x2[i];
        for (c, v) in [
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ]
        .into_iter()
        .enumerate()
        {
            a[(r, c)] = v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let e = v_t.row(min_idx);
    let en = Mat3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let e = t2.transpose() * en * t1;
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let e = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 0.0)) * v_t;
    let n = e.norm();
    (n > 0.0 && n.is_finite()).then(|| e / n)
}

/// Depths `(z1, z2)` of the point seen at `x1`, `x2` under `x2 ~ R x1 + t`.
fn triangulate_depths(r: &Mat3, t: &Vec3, x1: &Vec3, x2: &Vec3) -> Option<(f64, f64)> {
    let a = r * x1;
    // z1 a - z2 x2 = -t, least squares over two unknowns
    let m = Matrix2::new(a.dot(&a), -a.dot(x2), -a.dot(x2), x2.dot(x2));
    let b = Vector2::new(-a.dot(t), x2.dot(t));
    let z = m.try_inverse()? * b;
    Some((z.x, z.y))
}

/// Relative pose with unit translation from `E`, choosing the decomposition
/// that puts most correspondences in front of both cameras.
pub fn decompose_essential(e: &Mat3, x1: &[Vec3], x2: &[Vec3], idx: &[usize]) -> Option<Pose> {
    let svd = e.svd(true, true);
    let (mut u, mut v_t) = (svd.u?, svd.v_t?);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vec3 = u.column(2).into_owned();
    let mut best: Option<(usize, Pose)> = None;
    for r in [u * w * v_t, u * w.transpose() * v_t] {
        for tt in [t, -t] {
            let votes = idx
                .iter()
                .filter(|&&i| {
                    triangulate_depths(&r, &tt, &x1[i], &x2[i]).is_some_and(|(z1, z2)| z1 > 0.0 && z2 > 0.0)
                })
                .count();
            if best.as_ref().is_none_or(|(v, _)| votes > *v) {
                let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
                best = Some((votes, Pose::new(rot, tt)));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialFit {
    pub essential: Mat3,
    pub inlier_mask: Vec<bool>,
    pub relative_pose: Pose,
}

impl EssentialFit {
    pub fn n_inliers(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

/// RANSAC over minimal eight-point samples, refit on the best consensus set.
/// `tol` is in normalized image units.
pub fn ransac_essential(x1: &[Vec3], x2: &[Vec3], iterations: usize, tol: f64, seed: u64) -> Option<EssentialFit> {
    let n = x1.len();
    if n < 8 || x2.len() != n {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inliers_of = |e: &Mat3| -> Vec<bool> { (0..n).map(|i| sampson_error(e, &x1[i], &x2[i]) <= tol).collect() };
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..iterations {
        let idx = sample(&mut rng, n, 8).into_vec();
        let Some(e) = eight_point(x1, x2, &idx) else {
            continue;
        };
        let mask = inliers_of(&e);
        let c = count(&mask);
        if best.as_ref().is_none_or(|(b, _)| c > *b) {
            best = Some((c, mask));
        }
    }
    let (_, mut mask) = best?;
    let mut essential = None;
    // refit on the consensus set until it stops changing
    for _ in 0..5 {
        let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let Some(e) = eight_point(x1, x2, &idx) else {
            break;
        };
        let new_mask = inliers_of(&e);
        essential = Some(e);
        if new_mask == mask {
            break;
        }
        if count(&new_mask) < 8 {
            break;
        }
        mask = new_mask;
    }
    let essential = essential?;
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let relative_pose = decompose_essential(&essential, x1, x2, &idx)?;
    Some(EssentialFit {
        essential,
        inlier_mask: mask,
        relative_pose,
    })
}

/// Geometric verification of a retrieved candidate. Correspondences are
/// tracks of the same landmark id in both frames.
pub fn verify_loop(
    candidate: &LoopCandidate,
    tracks_query: &[Track],
    tracks_match: &[Track],
    k: &CameraIntrinsics,
    params: &LoopParams,
) -> LoopCandidate {
    let mut x_match = Vec::new();
    let mut x_query = Vec::new();
    for tq in tracks_query {
        if let Some(tm) = tracks_match.iter().find(|t| t.landmark_id == tq.landmark_id) {
            x_match.push(k.unproject(&tm.pixel));
            x_query.push(k.unproject(&tq.pixel));
        }
    }
    let mut out = LoopCandidate {
        inliers: 0,
        relative_pose: None,
        accepted: false,
        ..candidate.clone()
    };
    let seed = params.seed ^ ((candidate.query_id as u64) << 32) ^ candidate.match_id as u64;
    let tol = params.sampson_tol_px / k.fx.max(k.fy);
    if let Some(fit) = ransac_essential(&x_match, &x_query, params.ransac_iterations, tol, seed) {
        out.inliers = fit.n_inliers();
        out.relative_pose = Some(fit.relative_pose);
        out.accepted = out.inliers >= params.min_inliers;
    }
    out
}

/// Adds one loop edge per accepted candidate and solves the whole graph
/// with every non-gauge variable free.
pub fn metric_global_ba(
    graph: &mut FactorGraph,
    loops: &[LoopCandidate],
    params: &LoopParams,
    options: &SolveOptions,
) -> Result<SolveReport> {
    let accepted: Vec<&LoopCandidate> = loops.iter().filter(|l| l.accepted).collect();
    if accepted.is_empty() {
        return Err(Error::Precondition("metric global BA needs at least one accepted loop".into()));
    }
    for l in &accepted {
        if l.relative_pose.is_none() {
            return Err(Error::Precondition("accepted loop without a relative pose".into()));
        }
        if l.query_id >= graph.poses.len() || l.match_id >= graph.poses.len() {
            return Err(Error::Precondition(format!(
                "loop {}-{} references a missing keyframe",
                l.query_id, l.match_id
            )));
        }
    }
    for l in accepted {
        let rel = l.relative_pose.expect("checked above");
        graph.add_factor(Factor::relative_pose(
            l.query_id,
            l.match_id,
            rel.rotation,
            rel.translation,
            params.edge_information,
            params.edge_robust_delta,
        ));
    }
    for p in &mut graph.poses {
        p.fixed = false;
    }
    for l in &mut graph.landmarks {
        l.fixed = false;
    }
    solve(graph, options)
}

pub fn write_loops_csv<W: Write>(mut out: W, loops: &[LoopCandidate]) -> std::io::Result<()> {
    writeln!(out, "query_id,match_id,cosine_similarity,inliers")?;
    for l in loops.iter().filter(|l| l.accepted) {
        writeln!(out, "{},{},{:.6},{}", l.query_id, l.match_id, l.cosine_similarity, l.inliers)?;
    }
    Ok(())
}
