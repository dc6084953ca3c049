use std::collections::BTreeMap;

use nalgebra::{Quaternion, UnitQuaternion};

use super::{Mat3, Quat, SimTransform, Vec3};
use crate::ImageId;

/// Rigid world-to-camera transform: `x_cam = R * x_world + t`.
///
/// The camera center is `C = -R^T t`. The rotation is renormalized by every
/// constructor and composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Quat,
    translation: Vec3,
}

/// Poses keyed by image.
pub type PoseSet = BTreeMap<ImageId, Pose>;

fn renormalize(q: Quat) -> Quat {
    normalize_quaternion(q.into_inner())
}

/// Normalizes `q`, leaving quaternions already within a few ulps of unit
/// norm untouched so that text round-trips stay bit-exact.
pub(crate) fn normalize_quaternion(q: Quaternion<f64>) -> Quat {
    if (q.norm_squared() - 1.0).abs() <= 8.0 * f64::EPSILON {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::new_normalize(q)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    /// Pose from a scalar-first quaternion that need not be normalized.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64, translation: Vec3) -> Self {
        Self {
            rotation: normalize_quaternion(Quaternion::new(w, x, y, z)),
            translation,
        }
    }

    /// Pose with the given world-to-camera rotation and camera center.
    pub fn from_center(rotation: Quat, center: Vec3) -> Self {
        let rotation = renormalize(rotation);
        Self {
            translation: -(rotation * center),
            rotation,
        }
    }

    /// Pose of a camera at `eye` looking at `target`, with image `y` pointing
    /// roughly along `-up` (x right, y down, z forward).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        // rows of the world-to-camera rotation are the camera axes in world
        let m = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let rotation = UnitQuaternion::from_matrix(&m);
        Self::from_center(rotation, eye)
    }

    pub fn rotation(&self) -> &Quat {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Maps a world point into the camera frame.
    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// Re-expresses this camera in a world frame mapped by `sim`
    /// (`x_new = s R x_old + t`).
    pub fn transformed_by(&self, sim: &SimTransform) -> Pose {
        let center = sim.apply(&self.center());
        let rotation = self.rotation * sim.rotation().inverse();
        Pose::from_center(rotation, center)
    }

    /// Same as [`Pose::transformed_by`] for a rigid change of world frame
    /// given as a pose (`x_new = frame * x_old`).
    pub fn reframed(&self, frame: &Pose) -> Pose {
        self.compose(&frame.inverse())
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
    }
}
