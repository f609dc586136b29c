//! Dynamic-scene uncertainty gating.
//!
//! Each track gets an uncertainty `u` that blends the inverted prior
//! confidence with the ego-motion compensated depth change between two
//! keyframes. A sigmoid maps `u` to a weight `w` in `[0, 1]` and to a
//! bounded precision `omega = w / sigma0^2` used as information by the
//! scale estimator and by the metric factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec2, Z_MIN};

/// Uncertainty assigned to tracks whose temporal residual is undefined.
pub const U_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateParams {
    /// Weight of the spatial term, in `[0, 1]`.
    pub alpha: f64,
    pub tau: f64,
    pub temperature: f64,
    /// Nominal noise variance; `omega = w / sigma0_sq`.
    pub sigma0_sq: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            tau: 0.07,
            temperature: 0.02,
            sigma0_sq: 0.0025,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidInput(format!("alpha must be in [0,1], got {}", self.alpha)));
        }
        if !(self.temperature > 0.0) || !(self.sigma0_sq > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidInput(
                "temperature and sigma0_sq must be > 0, tau finite".into(),
            ));
        }
        Ok(())
    }
}

/// Per-track uncertainty, weight and precision.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateField {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub omega: Vec<f64>,
}

impl GateField {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Field with `w = 1` everywhere, as if gating were disabled.
    pub fn ungated(n: usize, params: &GateParams) -> Self {
        Self {
            u: vec![0.0; n],
            w: vec![1.0; n],
            omega: vec![1.0 / params.sigma0_sq; n],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relative depth residual `|d_j - d_pred| / d_pred` after moving the
/// back-projection of each pixel of frame `i` into frame `j` with
/// `rel_ij` (maps frame-`i` coordinates to frame `j`).
///
/// Tracks whose predicted point lands behind camera `j` get [`U_MAX`].
pub fn temporal_uncertainty(
    pixels_i: &[Vec2],
    depth_i: &[f64],
    depth_j: &[f64],
    rel_ij: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vec<f64>> {
    if pixels_i.len() != depth_i.len() || depth_i.len() != depth_j.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} pixels, {} / {} depths",
            pixels_i.len(),
            depth_i.len(),
            depth_j.len()
        )));
    }
    Ok(pixels_i
        .iter()
        .zip(depth_i.iter().zip(depth_j))
        .map(|(px, (&di, &dj))| {
            let xi = k.unproject(px) * di;
            let predicted = rel_ij.transform(&xi).z;
            if predicted <= Z_MIN || !(di > 0.0) || !(dj > 0.0) {
                U_MAX
            } else {
                (dj - predicted).abs() / predicted
            }
        })
        .collect())
}

/// `u = alpha * u_spatial + (1 - alpha) * u_temporal`, elementwise.
pub fn fuse_uncertainty(u_spatial: &[f64], u_temporal: &[f64], params: &GateParams) -> Result<Vec<f64>> {
    if u_spatial.len() != u_temporal.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} spatial vs {} temporal",
            u_spatial.len(),
            u_temporal.len()
        )));
    }
    let a = params.alpha;
    Ok(u_spatial
        .iter()
        .zip(u_temporal)
        .map(|(&s, &t)| {
            // keep alpha = 0 or 1 exact even for U_MAX inputs
            if a == 1.0 {
                s
            } else if a == 0.0 {
                t
            } else {
                a * s + (1.0 - a) * t
            }
        })
        .collect())
}

/// Spatial uncertainty from a confidence value in `[0, 1]`.
pub fn spatial_uncertainty(confidence: f64) -> f64 {
    1.0 - confidence
}

/// Sigmoid gate `w = sigma((tau - u) / T)`, `omega = w / sigma0^2`.
pub fn gate(u: &[f64], params: &GateParams) -> GateField {
    let w: Vec<f64> = u
        .iter()
        .map(|&ui| sigmoid((params.tau - ui) / params.temperature))
        .collect();
    let omega = w.iter().map(|wi| wi / params.sigma0_sq).collect();
    GateField {
        u: u.to_vec(),
        w,
        omega,
    }
}
