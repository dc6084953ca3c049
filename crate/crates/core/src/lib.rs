//! Incremental, pose-free reconstruction from dense pointmaps.
//!
//! The crate registers unordered images one batch at a time: a seed image is
//! chosen from an image-similarity graph, further images are registered with
//! hypothesize-and-verify PnP against pointmaps expressed in the seed frame,
//! and poses are refined by minimizing a robust point-to-camera-ray
//! consistency loss over sparse multi-view tracks. Pointmaps come from a
//! [`provider::PointmapProvider`], either a synthetic scene with a
//! configurable error model or files produced by an external regressor.

pub mod cli;
pub mod geometry;
pub mod graph;
pub mod pipeline;
pub mod provider;
pub mod refinement;
pub mod registration;
pub mod tracks;

use std::fmt;

use serde::{Deserialize, Serialize};

/// Identifier of an input image.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ImageId(pub u32);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for ImageId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(ImageId)
    }
}
