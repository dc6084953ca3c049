//! Pointmap sources: a synthetic oracle with configurable noise and outliers,
//! and a loader for pointmaps computed elsewhere.

mod file;
mod pointmap;
mod scene;
mod synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose, PoseSet};
use crate::ImageId;

pub use file::{format_intrinsics, parse_intrinsics, FileProvider};
pub use pointmap::{load_pointmap, save_pointmap, Pointmap, NO_CORR};
pub use scene::{generate_scene, SceneConfig, SyntheticScene, Trajectory};
pub use synthetic::{query_pointmaps, SyntheticProvider};

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("unknown image id {0}")]
    UnknownImage(ImageId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsatisfiable scene: {0}")]
    Unsatisfiable(String),
}

impl ProviderError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Noise model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Initial isotropic noise, scene units.
    pub noise_sigma0: f64,
    pub outlier_fraction: f64,
    /// Per-observation sigma multiplier γ.
    pub attenuation: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            noise_sigma0: 0.0,
            outlier_fraction: 0.0,
            attenuation: 0.7,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if !(self.noise_sigma0 >= 0.0 && self.noise_sigma0.is_finite()) {
            return Err(ProviderError::InvalidConfig(format!("noise_sigma0 {} must be >= 0", self.noise_sigma0)));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(ProviderError::InvalidConfig(format!(
                "outlier_fraction {} outside [0, 1)",
                self.outlier_fraction
            )));
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return Err(ProviderError::InvalidConfig(format!("attenuation {} outside (0, 1]", self.attenuation)));
        }
        Ok(())
    }
}

/// Noise parameters plus how many times each image has been observed.
///
/// Observation stands in for finetuning the regressor on an image: every
/// observation shrinks that image's noise by the attenuation factor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderState {
    config: ProviderConfig,
    observations: BTreeMap<ImageId, u32>,
}

impl ProviderState {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        Ok(Self {
            config,
            observations: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn observation_count(&self, id: ImageId) -> u32 {
        self.observations.get(&id).copied().unwrap_or(0)
    }

    /// `σ0 · γ^count`.
    pub fn effective_sigma(&self, id: ImageId) -> f64 {
        self.config.noise_sigma0 * self.config.attenuation.powi(self.observation_count(id) as i32)
    }

    pub fn observe(&mut self, ids: &[ImageId]) {
        for id in ids {
            *self.observations.entry(*id).or_insert(0) += 1;
        }
    }
}

/// Source of pointmap pairs in a single global frame.
pub trait PointmapProvider {
    fn image_ids(&self) -> Vec<ImageId>;

    fn intrinsics(&self, id: ImageId) -> Result<Intrinsics, ProviderError>;

    /// Pointmaps of the reference and the target image.
    fn query(&self, reference: ImageId, target: ImageId) -> Result<(Pointmap, Pointmap), ProviderError>;

    fn observe(&mut self, ids: &[ImageId]);

    fn effective_sigma(&self, id: ImageId) -> f64;

    /// Re-expresses all subsequent output in a new world frame: a point `x`
    /// is returned as `frame * x`.
    fn set_frame(&mut self, frame: Pose);

    fn ground_truth(&self) -> Option<&PoseSet> {
        None
    }

    /// Characteristic scene size, when known.
    fn scene_scale(&self) -> Option<f64> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attenuation_by_observation() {
        let mut s = ProviderState::new(ProviderConfig {
            noise_sigma0: 0.2,
            outlier_fraction: 0.0,
            attenuation: 0.5,
        })
        .unwrap();
        let (a, b) = (ImageId(1), ImageId(2));
        assert_eq!(s.effective_sigma(a), 0.2);
        s.observe(&[a]);
        s.observe(&[a]);
        assert_eq!(s.effective_sigma(a), 0.2 * 0.25);
        assert_eq!(s.effective_sigma(b), 0.2);
        let mut prev = s.effective_sigma(a);
        for _ in 0..50 {
            s.observe(&[a]);
            assert!(s.effective_sigma(a) <= prev);
            prev = s.effective_sigma(a);
        }
    }

    #[test]
    fn config_ranges() {
        let bad = [
            ProviderConfig { noise_sigma0: -1.0, ..Default::default() },
            ProviderConfig { outlier_fraction: 1.0, ..Default::default() },
            ProviderConfig { attenuation: 0.0, ..Default::default() },
            ProviderConfig { attenuation: 1.5, ..Default::default() },
        ];
        for c in bad {
            assert!(ProviderState::new(c).is_err());
        }
    }
}
