//! Rigid and similarity transforms, pinhole projection, trajectory
//! alignment and the Gaussian-primitive pixel compositor.

mod align;
mod camera;
mod gaussian;
mod pose;
pub mod posefile;

pub use align::{align_and_evaluate, pose_error, umeyama_align, Evaluation, PoseError, SimTransform};
pub use camera::{backproject_ray, project, Intrinsics, MIN_DEPTH};
pub use gaussian::{alpha_composite, gaussian_covariance, GaussianPrimitive, PixelContribution};
pub use pose::{Pose, PoseSet};

use thiserror::Error;

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Quat = nalgebra::UnitQuaternion<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z:e})")]
    BehindCamera { z: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("length mismatch: {src} source points vs {dst} target points")]
    LengthMismatch { src: usize, dst: usize },
    #[error("need at least 3 common images for alignment, found {0}")]
    TooFewCommon(usize),
    #[error("invalid gaussian primitive: {0}")]
    InvalidPrimitive(String),
    #[error("invalid contribution at index {index}: {reason}")]
    InvalidContribution { index: usize, reason: String },
    #[error("contributions not sorted front-to-back: depth at index {index} ({depth}) is smaller than its predecessor ({previous})")]
    UnsortedContributions {
        index: usize,
        depth: f64,
        previous: f64,
    },
}

/// Rotation angle in radians of a unit quaternion, via the vector part so
/// that small angles keep full precision.
pub fn rotation_angle(q: &Quat) -> f64 {
    let v = q.as_ref().imag().norm();
    2.0 * v.min(1.0).asin()
}

/// Skew-symmetric cross-product matrix of `v`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
