//! Gated back-projection of dense depth samples into a colored cloud.

use std::collections::HashMap;

use super::PipelineState;
use crate::error::Result;
use crate::gating::{fuse_uncertainty, gate, spatial_uncertainty, temporal_uncertainty, GateField};
use crate::geometry::{Vec2, Vec3};
use crate::sim::DenseFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vec3,
    pub rgb: [u8; 3],
}

/// Color ramp from amber (weight at the threshold) to teal (weight one).
fn color(w: f64, w_min: f64) -> [u8; 3] {
    let t = if w_min < 1.0 { ((w - w_min) / (1.0 - w_min)).clamp(0.0, 1.0) } else { 1.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    [lerp(230.0, 40.0), lerp(160.0, 180.0), lerp(40.0, 170.0)]
}

/// Back-projects every dense sample whose gate weight reaches
/// `fuse_weight_min`, using the optimized pose and the prior depth
/// converted to map units with that keyframe's scale estimate.
pub fn fuse_point_cloud(state: &PipelineState, dense: &[DenseFrame]) -> Result<Vec<ColoredPoint>> {
    let k = state.graph.intrinsics;
    let params = &state.config.gate;
    let w_min = state.config.fuse_weight_min;
    let mut cloud = Vec::new();
    let mut previous: Option<(usize, HashMap<u64, (Vec2, f64)>)> = None;
    for frame in dense {
        let t = frame.keyframe_id;
        if t >= state.keyframes.len() {
            break;
        }
        let to_map = state.map_unit / state.keyframes[t].scale.scale();
        let depths: Vec<f64> = frame.samples.iter().map(|s| s.prior_depth * to_map).collect();
        let field = if state.ablation.no_dsug {
            GateField::ungated(frame.samples.len(), params)
        } else {
            let u_s: Vec<f64> = frame.samples.iter().map(|s| spatial_uncertainty(s.spatial_confidence)).collect();
            let mut u_t = vec![params.tau; frame.samples.len()];
            if let Some((tp, prev)) = &previous {
                let rel = state.pose(t).compose(&state.pose(*tp).inverse());
                let mut idx = Vec::new();
                let mut px = Vec::new();
                let mut d_i = Vec::new();
                let mut d_j = Vec::new();
                for (i, s) in frame.samples.iter().enumerate() {
                    if let Some(&(p, d)) = prev.get(&s.point_id) {
                        idx.push(i);
                        px.push(p);
                        d_i.push(d);
                        d_j.push(depths[i]);
                    }
                }
                for (i, u) in idx.into_iter().zip(temporal_uncertainty(&px, &d_i, &d_j, &rel, &k)?) {
                    u_t[i] = u;
                }
            }
            gate(&fuse_uncertainty(&u_s, &u_t, params)?, params)
        };
        let cam_to_world = state.pose(t).inverse();
        for (i, s) in frame.samples.iter().enumerate() {
            let w = field.w[i];
            if w < w_min || !(depths[i] > 0.0) {
                continue;
            }
            cloud.push(ColoredPoint {
                position: cam_to_world.transform(&(k.unproject(&s.pixel) * depths[i])),
                rgb: color(w, w_min),
            });
        }
        previous = Some((
            t,
            frame
                .samples
                .iter()
                .zip(&depths)
                .map(|(s, d)| (s.point_id, (s.pixel, *d)))
                .collect(),
        ));
    }
    Ok(cloud)
}
