//! Monocular SLAM back end with metric scale recovered from learned depth
//! priors.
//!
//! Depth priors enter in three ways: a per-keyframe log-scale estimate fed
//! to a scalar Kalman filter, point-to-ray factors that anchor landmarks to
//! metric viewing rays, and log-depth factors in the global solve. An
//! uncertainty gate down-weights tracks on moving objects. A deterministic
//! simulator supplies scenes with ground truth.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod factors;
pub mod gating;
pub mod geometry;
pub mod io;
pub mod loops;
pub mod optimizer;
pub mod pipeline;
pub mod scale;
pub mod sim;

pub use error::{Error, Result};
pub use factors::{Factor, FactorKind, RayAnchor};
pub use gating::{GateField, GateParams};
pub use geometry::{CameraIntrinsics, Landmark, PluckerRay, Pose, Vec2, Vec3};
pub use optimizer::{FactorGraph, SolveOptions, SolveReport};
pub use scale::{ScaleBelief, ScaleObservation};
pub use sim::{FrameObservation, Track, World, WorldConfig};
