use std::collections::BTreeMap;

use nalgebra::{Matrix3, UnitQuaternion};
use serde::Serialize;

use super::{rotation_angle, GeometryError, Pose, PoseSet, Quat, Vec3};
use crate::ImageId;

/// Similarity transform `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTransform {
    scale: f64,
    rotation: Quat,
    translation: Vec3,
}

impl SimTransform {
    pub fn new(scale: f64, rotation: Quat, translation: Vec3) -> Result<Self, GeometryError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(GeometryError::Degenerate(format!("similarity scale must be positive, got {scale}")));
        }
        Ok(Self {
            scale,
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Quat {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x * self.scale + self.translation
    }

    pub fn apply_inverse(&self, y: &Vec3) -> Vec3 {
        self.rotation.inverse() * (y - self.translation) / self.scale
    }

    pub fn inverse(&self) -> SimTransform {
        let rotation = self.rotation.inverse();
        SimTransform {
            scale: 1.0 / self.scale,
            translation: -(rotation * self.translation) / self.scale,
            rotation,
        }
    }
}

/// Least-squares similarity `dst ≈ s R src + t` (Umeyama's closed form).
///
/// Fails on fewer than three pairs and on collinear or coincident source
/// points, where the rotation about the common line is unobservable.
pub fn umeyama_align(src: &[Vec3], dst: &[Vec3]) -> Result<SimTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    let n = src.len();
    if n < 3 {
        return Err(GeometryError::Degenerate(format!("need at least 3 point pairs, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_src = src.iter().sum::<Vec3>() * inv_n;
    let mu_dst = dst.iter().sum::<Vec3>() * inv_n;

    let mut var_src = 0.0;
    let mut cov = Matrix3::zeros();
    for (x, y) in src.iter().zip(dst) {
        let xc = x - mu_src;
        let yc = y - mu_dst;
        var_src += xc.norm_squared();
        cov += yc * xc.transpose();
    }
    var_src *= inv_n;
    cov *= inv_n;

    let spread = src.iter().map(|x| (x - mu_src).norm()).fold(0.0, f64::max);
    if !(var_src > 0.0) || spread == 0.0 {
        return Err(GeometryError::Degenerate("source points coincide".into()));
    }
    // collinear sources leave a rank-1 source scatter
    let mut scatter = Matrix3::zeros();
    for x in src {
        let xc = x - mu_src;
        scatter += xc * xc.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let mut ev: Vec<f64> = eig.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[1] <= 1e-12 * ev[0] {
        return Err(GeometryError::Degenerate("source points are collinear".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::Degenerate("SVD of cross-covariance failed".into())),
    };
    let d = svd.singular_values;
    if d[1] <= 1e-14 * d[0].max(f64::MIN_POSITIVE) {
        return Err(GeometryError::Degenerate("rank-deficient cross-covariance".into()));
    }
    let mut s_diag = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        // singular values come sorted, so the smallest one is last
        s_diag.z = -1.0;
    }
    let rot = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = d.component_mul(&s_diag).sum() / var_src;
    let rotation = UnitQuaternion::from_matrix(&rot);
    let translation = mu_dst - rotation * mu_src * scale;
    SimTransform::new(scale, rotation, translation)
}

/// Rotation (degrees) and camera-center distance between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation: f64,
}

pub fn pose_error(pred: &Pose, gt: &Pose) -> PoseError {
    let rel = pred.rotation() * gt.rotation().inverse();
    PoseError {
        rotation_deg: rotation_angle(&rel).to_degrees(),
        translation: (pred.center() - gt.center()).norm(),
    }
}

/// Outcome of aligning a predicted trajectory to ground truth.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub alignment: SimTransform,
    pub per_image: BTreeMap<ImageId, PoseError>,
    pub mean_rotation_deg: f64,
    pub mean_translation: f64,
}

/// Aligns predicted camera centers to ground truth with a similarity, then
/// reports per-image pose errors in the ground-truth frame.
pub fn align_and_evaluate(pred: &PoseSet, gt: &PoseSet) -> Result<Evaluation, GeometryError> {
    let common: Vec<ImageId> = pred.keys().filter(|id| gt.contains_key(id)).copied().collect();
    if common.len() < 3 {
        return Err(GeometryError::TooFewCommon(common.len()));
    }
    let src: Vec<Vec3> = common.iter().map(|id| pred[id].center()).collect();
    let dst: Vec<Vec3> = common.iter().map(|id| gt[id].center()).collect();
    let alignment = umeyama_align(&src, &dst)?;
    let per_image: BTreeMap<ImageId, PoseError> = common
        .iter()
        .map(|id| (*id, pose_error(&pred[id].transformed_by(&alignment), &gt[id])))
        .collect();
    let n = per_image.len() as f64;
    let mean_rotation_deg = per_image.values().map(|e| e.rotation_deg).sum::<f64>() / n;
    let mean_translation = per_image.values().map(|e| e.translation).sum::<f64>() / n;
    Ok(Evaluation {
        alignment,
        per_image,
        mean_rotation_deg,
        mean_translation,
    })
}
