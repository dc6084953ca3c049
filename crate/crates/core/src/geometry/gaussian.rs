use nalgebra::Matrix3;

use super::{GeometryError, Mat3, Quat, Vec3};

/// Zeroth-order real spherical-harmonic basis constant.
const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Anisotropic 3D Gaussian anchored on a pointmap sample.
///
/// The mean is the base point plus a predicted offset; the covariance is
/// factored into a rotation and per-axis scales, so it is positive
/// semi-definite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    opacity: f64,
    rotation: Quat,
    scale: Vec3,
    sh_degree: u8,
    /// `(sh_degree + 1)^2` RGB coefficient triples.
    sh_coeffs: Vec<Vec3>,
    offset: Vec3,
    base_point: Vec3,
}

impl GaussianPrimitive {
    pub fn new(
        opacity: f64,
        rotation: Quat,
        scale: Vec3,
        sh_degree: u8,
        sh_coeffs: Vec<Vec3>,
        base_point: Vec3,
        offset: Vec3,
    ) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&opacity) {
            return Err(GeometryError::InvalidPrimitive(format!("opacity {opacity} outside [0, 1]")));
        }
        if !scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(GeometryError::InvalidPrimitive(format!("scales must be positive, got {scale:?}")));
        }
        let expected = (sh_degree as usize + 1).pow(2);
        if sh_coeffs.len() != expected {
            return Err(GeometryError::InvalidPrimitive(format!(
                "degree {sh_degree} needs {expected} SH coefficients, got {}",
                sh_coeffs.len()
            )));
        }
        Ok(Self {
            opacity,
            rotation: Quat::new_normalize(rotation.into_inner()),
            scale,
            sh_degree,
            sh_coeffs,
            offset,
            base_point,
        })
    }

    /// Degree-0 primitive whose constant color evaluates to `rgb`.
    pub fn with_color(opacity: f64, rotation: Quat, scale: Vec3, rgb: Vec3, base_point: Vec3, offset: Vec3) -> Result<Self, GeometryError> {
        let dc = (rgb - Vec3::repeat(0.5)) / SH_C0;
        Self::new(opacity, rotation, scale, 0, vec![dc], base_point, offset)
    }

    pub fn opacity(&self) -> f64 {
        self.opacity
    }

    pub fn rotation(&self) -> &Quat {
        &self.rotation
    }

    pub fn scale(&self) -> &Vec3 {
        &self.scale
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    pub fn sh_coeffs(&self) -> &[Vec3] {
        &self.sh_coeffs
    }

    pub fn offset(&self) -> &Vec3 {
        &self.offset
    }

    pub fn base_point(&self) -> &Vec3 {
        &self.base_point
    }

    pub fn mean(&self) -> Vec3 {
        self.base_point + self.offset
    }

    /// View-independent (degree-0) color, clamped to `[0, 1]`.
    pub fn base_color(&self) -> Vec3 {
        (self.sh_coeffs[0] * SH_C0 + Vec3::repeat(0.5)).map(|c| c.clamp(0.0, 1.0))
    }
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn gaussian_covariance(g: &GaussianPrimitive) -> Mat3 {
    let r = g.rotation.to_rotation_matrix().into_inner();
    let s = Matrix3::from_diagonal(&g.scale);
    let m = r * s;
    let cov = m * m.transpose();
    // exact symmetry regardless of rounding order
    (cov + cov.transpose()) * 0.5
}

/// One Gaussian's contribution to a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelContribution {
    pub color: Vec3,
    pub alpha: f64,
    pub depth: f64,
}

/// Front-to-back blending `C = Σ c_i α_i Π_{j<i} (1 - α_j)`, with the
/// remaining transmittance falling through to `background`.
pub fn alpha_composite(contributions: &[PixelContribution], background: &Vec3) -> Result<Vec3, GeometryError> {
    let mut color = Vec3::zeros();
    let mut transmittance = 1.0;
    let mut previous = f64::NEG_INFINITY;
    for (index, c) in contributions.iter().enumerate() {
        if !(0.0..=1.0).contains(&c.alpha) {
            return Err(GeometryError::InvalidContribution {
                index,
                reason: format!("alpha {} outside [0, 1]", c.alpha),
            });
        }
        if !c.color.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(GeometryError::InvalidContribution {
                index,
                reason: format!("color {:?} outside [0, 1]", c.color),
            });
        }
        if c.depth < previous {
            return Err(GeometryError::UnsortedContributions {
                index,
                depth: c.depth,
                previous,
            });
        }
        previous = c.depth;
        color += c.color * (c.alpha * transmittance);
        transmittance *= 1.0 - c.alpha;
    }
    Ok(color + background * transmittance)
}
