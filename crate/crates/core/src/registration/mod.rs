//! Coarse camera registration from direct 2D-3D correspondences.

mod p3p;
mod ransac;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Vec2, Vec3};
use crate::provider::{Pointmap, PointmapProvider, ProviderError};
use crate::ImageId;

pub use p3p::p3p_solve;
pub use ransac::{ransac_pnp, refine_pnp, sigmoid, soft_inlier_score, RegistrationResult};

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// A pixel and the 3D point predicted for it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vec2,
    pub point: Vec3,
    /// Source cell `(col, row)` in the pointmap grid.
    pub cell: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub hypothesis_count: usize,
    /// Hard inlier threshold τ in pixels.
    pub reproj_threshold: f64,
    pub inlier_alpha: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
    /// Redraws allowed per hypothesis when a sample is degenerate.
    pub max_resamples: usize,
    pub refine_rounds: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            hypothesis_count: 64,
            reproj_threshold: 6.0,
            inlier_alpha: 100.0,
            min_inliers: 5000,
            rng_seed: 0,
            max_resamples: 100,
            refine_rounds: 10,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.hypothesis_count < 1 {
            return Err(RegistrationError::InvalidConfig("hypothesis_count must be >= 1".into()));
        }
        if !(self.reproj_threshold > 0.0) {
            return Err(RegistrationError::InvalidConfig(format!(
                "reproj_threshold {} must be > 0",
                self.reproj_threshold
            )));
        }
        if self.min_inliers < 4 {
            return Err(RegistrationError::InvalidConfig(format!("min_inliers {} must be >= 4", self.min_inliers)));
        }
        if !(self.inlier_alpha > 0.0) {
            return Err(RegistrationError::InvalidConfig("inlier_alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// One correspondence per `downsample × downsample` block holding a valid
/// sample: the valid cell closest to the block's anchor cell
/// `(bx + s/2, by + s/2)`, first in row-major order on ties. On a fully
/// valid grid this is the strided grid.
pub fn build_correspondences(pm: &Pointmap, downsample: u32) -> Vec<Correspondence> {
    assert!(downsample >= 1, "downsample must be >= 1");
    let s = downsample;
    let (w, h) = (pm.width(), pm.height());
    let mut out = Vec::new();
    for by in (0..h).step_by(s as usize) {
        for bx in (0..w).step_by(s as usize) {
            let center = Intrinsics::pixel_center(bx + s / 2, by + s / 2);
            let mut best: Option<(f64, u32, u32)> = None;
            for row in by..(by + s).min(h) {
                for col in bx..(bx + s).min(w) {
                    if !pm.is_valid(pm.index(col, row)) {
                        continue;
                    }
                    let d = (Vec2::new(col as f64 + 0.5, row as f64 + 0.5) - center).norm_squared();
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, col, row));
                    }
                }
            }
            if let Some((_, col, row)) = best {
                let idx = pm.index(col, row);
                out.push(Correspondence {
                    pixel: pm.pixel(idx),
                    point: *pm.point(idx),
                    cell: (col, row),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegistrationOutcome {
    Accepted(RegistrationResult),
    Rejected(RegistrationResult),
}

impl RegistrationOutcome {
    pub fn result(&self) -> &RegistrationResult {
        match self {
            Self::Accepted(r) | Self::Rejected(r) => r,
        }
    }

    pub fn is_accepted(&self) -> bool {
        matches!(self, Self::Accepted(_))
    }
}

/// Registers `target` against the frame supplied by an already registered
/// `reference`; accepted iff the inlier count exceeds `cfg.min_inliers`.
///
/// Fewer than four correspondences count as a rejection with zero inliers.
pub fn try_register(
    target: ImageId,
    reference: ImageId,
    provider: &dyn PointmapProvider,
    cfg: &RansacConfig,
    downsample: u32,
) -> Result<RegistrationOutcome, RegistrationError> {
    let k = provider.intrinsics(target)?;
    let (_, pm) = provider.query(reference, target)?;
    register_pointmap(target, reference, &pm, &k, cfg, downsample)
}

/// [`try_register`] on a target pointmap that has already been queried.
pub fn register_pointmap(
    target: ImageId,
    reference: ImageId,
    pm: &Pointmap,
    k: &Intrinsics,
    cfg: &RansacConfig,
    downsample: u32,
) -> Result<RegistrationOutcome, RegistrationError> {
    cfg.validate()?;
    let corrs = build_correspondences(pm, downsample);
    let mut seeded = cfg.clone();
    seeded.rng_seed = cfg
        .rng_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(((target.0 as u64) << 32) | reference.0 as u64);
    let result = match ransac_pnp(&corrs, k, &seeded) {
        Ok(r) => r,
        Err(RegistrationError::TooFewCorrespondences(_)) => RegistrationResult::failed(corrs.len()),
        Err(e) => return Err(e),
    };
    Ok(if result.inlier_count > cfg.min_inliers {
        RegistrationOutcome::Accepted(result)
    } else {
        RegistrationOutcome::Rejected(result)
    })
}
