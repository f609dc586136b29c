//! Log-domain metric scale estimation.
//!
//! A single keyframe yields a weighted least-squares estimate of
//! `log(prior_depth / map_depth)` using the gate precisions as weights; a
//! scalar random-walk Kalman filter tracks it over time with the WLS
//! variance as measurement noise. Working in log space keeps the
//! published scale `exp(log_mean)` strictly positive.

use crate::error::{Error, Result};

/// Variance used before any observation arrives.
pub const UNINFORMED_VARIANCE: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleBelief {
    pub log_mean: f64,
    pub variance: f64,
    pub keyframe_id: usize,
}

impl Default for ScaleBelief {
    fn default() -> Self {
        Self {
            log_mean: 0.0,
            variance: UNINFORMED_VARIANCE,
            keyframe_id: 0,
        }
    }
}

impl ScaleBelief {
    pub fn new(log_mean: f64, variance: f64, keyframe_id: usize) -> Self {
        Self {
            log_mean,
            variance,
            keyframe_id,
        }
    }

    pub fn scale(&self) -> f64 {
        self.log_mean.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleObservation {
    pub log_scale: f64,
    pub variance: f64,
    /// Sum of the precisions that entered the estimate.
    pub n_effective: f64,
}

/// Precision-weighted mean of `log(prior) - log(track)`.
///
/// Tracks with zero precision are ignored entirely, whatever their depths.
pub fn wls_log_scale(track_depths: &[f64], prior_depths: &[f64], omega: &[f64]) -> Result<ScaleObservation> {
    if track_depths.len() != prior_depths.len() || prior_depths.len() != omega.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} track depths, {} priors, {} weights",
            track_depths.len(),
            prior_depths.len(),
            omega.len()
        )));
    }
    let mut sum_w = 0.0;
    let mut sum_wz = 0.0;
    for ((&d, &p), &w) in track_depths.iter().zip(prior_depths).zip(omega) {
        if w < 0.0 || !w.is_finite() {
            return Err(Error::InvalidInput(format!("precision must be finite and >= 0, got {w}")));
        }
        if w == 0.0 {
            continue;
        }
        if !(d > 0.0) || !(p > 0.0) {
            return Err(Error::InvalidInput(format!(
                "depths must be positive, got track {d} prior {p}"
            )));
        }
        sum_w += w;
        sum_wz += w * (p.ln() - d.ln());
    }
    if sum_w <= 0.0 {
        return Err(Error::NoInformation);
    }
    Ok(ScaleObservation {
        log_scale: sum_wz / sum_w,
        variance: 1.0 / sum_w,
        n_effective: sum_w,
    })
}

/// Random-walk prediction: mean unchanged, variance grows by `q`.
pub fn kalman_predict(belief: &ScaleBelief, process_noise_q: f64) -> ScaleBelief {
    ScaleBelief {
        variance: belief.variance + process_noise_q,
        ..*belief
    }
}

pub fn kalman_update(belief: &ScaleBelief, obs: &ScaleObservation) -> ScaleBelief {
    let total = belief.variance + obs.variance;
    let gain = belief.variance / total;
    ScaleBelief {
        log_mean: belief.log_mean + gain * (obs.log_scale - belief.log_mean),
        // product form stays positive when the gain rounds to one
        variance: belief.variance * obs.variance / total,
        keyframe_id: belief.keyframe_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn confident_observation_keeps_variance_positive() {
        let b = ScaleBelief::new(0.0, 1e6, 0);
        let obs = ScaleObservation {
            log_scale: 1.0,
            variance: 1e-12,
            n_effective: 1e12,
        };
        let u = kalman_update(&b, &obs);
        assert!(u.variance > 0.0 && u.variance <= 1e-12);
        assert!((u.log_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_ratio_gives_ln2() {
        let d = [1.0, 2.5, 4.0];
        let p = [2.0, 5.0, 8.0];
        for w in [[1.0, 1.0, 1.0], [0.1, 5.0, 2.0]] {
            let o = wls_log_scale(&d, &p, &w).unwrap();
            assert!((o.log_scale - LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_two_track_example() {
        let o = wls_log_scale(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((o.log_scale - 0.75 * LN_2).abs() < 1e-15);
        assert!((o.log_scale.exp() - 1.681_792_830_507_429).abs() < 1e-12);
        assert_eq!(o.variance, 0.25);
        assert_eq!(o.n_effective, 4.0);
    }

    #[test]
    fn zero_weight_track_is_ignored() {
        let base = wls_log_scale(&[1.0, 2.0], &[1.1, 2.3], &[1.0, 2.0]).unwrap();
        let with_wild = wls_log_scale(&[1.0, 2.0, 3.0], &[1.1, 2.3, 1e9], &[1.0, 2.0, 0.0]).unwrap();
        assert_eq!(base, with_wild);
        let with_neg = wls_log_scale(&[1.0, 2.0, -1.0], &[1.1, 2.3, 0.0], &[1.0, 2.0, 0.0]).unwrap();
        assert_eq!(base, with_neg);
    }

    #[test]
    fn all_gated_out_is_an_error() {
        assert!(matches!(
            wls_log_scale(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::NoInformation)
        ));
        assert!(wls_log_scale(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
        assert!(wls_log_scale(&[-1.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn predict_examples() {
        let b = ScaleBelief::new(0.3, 1.0, 4);
        assert_eq!(kalman_predict(&b, 0.0), b);
        let p = kalman_predict(&b, 1e-4);
        assert!((p.variance - 1.0001).abs() < 1e-15);
        assert_eq!(p.log_mean, 0.3);
        let mut c = b;
        for _ in 0..10 {
            c = kalman_predict(&c, 0.5);
        }
        assert!((c.variance - 6.0).abs() < 1e-12);
    }

    #[test]
    fn update_examples() {
        let prior = ScaleBelief::new(0.0, 1.0, 0);
        let post = kalman_update(
            &prior,
            &ScaleObservation {
                log_scale: LN_2,
                variance: 1.0,
                n_effective: 1.0,
            },
        );
        assert!((post.log_mean - 0.346_573_590_279_972_6).abs() < 1e-12);
        assert_eq!(post.variance, 0.5);

        let post = kalman_update(
            &prior,
            &ScaleObservation {
                log_scale: 5.0,
                variance: 1e12,
                n_effective: 1e-12,
            },
        );
        assert!(post.log_mean.abs() < 1e-11);
        assert!((post.variance - 1.0).abs() < 1e-11);
    }

    #[test]
    fn information_adds_with_zero_process_noise() {
        let p0 = 2.0;
        let r = 0.3;
        let mut b = ScaleBelief::new(0.0, p0, 0);
        let obs = ScaleObservation {
            log_scale: 0.2,
            variance: r,
            n_effective: 1.0 / r,
        };
        for n in 1..=25 {
            b = kalman_update(&kalman_predict(&b, 0.0), &obs);
            let closed = 1.0 / (1.0 / p0 + n as f64 / r);
            assert!((b.variance - closed).abs() < 1e-12 * closed.max(1.0));
            assert!(b.variance < p0);
        }
    }

    #[test]
    fn scaling_priors_shifts_log_scale() {
        let d = [1.0, 2.0, 3.5, 0.7];
        let p = [1.1, 1.9, 3.9, 0.8];
        let w = [0.3, 1.0, 0.8, 0.05];
        let base = wls_log_scale(&d, &p, &w).unwrap();
        for c in [0.25, 3.0, 17.0] {
            let scaled: Vec<f64> = p.iter().map(|x| x * c).collect();
            let o = wls_log_scale(&d, &scaled, &w).unwrap();
            assert!((o.log_scale.exp() - c * base.log_scale.exp()).abs() < 1e-12 * c);
            assert_eq!(o.variance, base.variance);
        }
    }
}
