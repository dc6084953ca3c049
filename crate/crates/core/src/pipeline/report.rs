use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::geometry::posefile::format_poses;
use crate::geometry::{align_and_evaluate, GeometryError, PoseSet};
use crate::refinement::SolveSummary;
use crate::ImageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Seed,
    Reference,
    Register,
    Tracks,
    Refine,
    Observe,
    Finalize,
    Normalize,
    Evaluate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Seed => "seed",
            Stage::Reference => "reference",
            Stage::Register => "register",
            Stage::Tracks => "tracks",
            Stage::Refine => "refine",
            Stage::Observe => "observe",
            Stage::Finalize => "finalize",
            Stage::Normalize => "normalize",
            Stage::Evaluate => "evaluate",
        };
        f.write_str(s)
    }
}

/// One line of the event log: `epoch stage image_id outcome value`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub epoch: usize,
    pub stage: Stage,
    pub image_id: Option<ImageId>,
    pub outcome: String,
    pub value: f64,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let id = self.image_id.map_or("-".to_string(), |i| i.to_string());
        write!(f, "{} {} {} {} {}", self.epoch, self.stage, id, self.outcome, self.value)
    }
}

pub fn format_events(events: &[Event]) -> String {
    events.iter().map(|e| format!("{e}\n")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub reference: ImageId,
    pub attempted: Vec<ImageId>,
    pub registered: Vec<ImageId>,
    pub tracks: usize,
    pub refine: Option<SolveSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    /// Every image registered.
    Complete,
    /// Some images are unreachable from the registered set.
    FrontierExhausted,
    MaxEpochs,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageError {
    pub epoch: usize,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub image_id: ImageId,
    pub coarse_rotation_deg: f64,
    pub coarse_translation: f64,
    pub refined_rotation_deg: f64,
    pub refined_translation: f64,
}

/// Pose errors of the coarse (registration) and refined poses, each set
/// aligned to ground truth on its own.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub per_image: Vec<ImageMetrics>,
    pub coarse_mean_rotation_deg: f64,
    pub coarse_mean_translation: f64,
    pub refined_mean_rotation_deg: f64,
    pub refined_mean_translation: f64,
    /// Fraction of non-seed images whose refined rotation error is strictly
    /// below the coarse one.
    pub refined_better_fraction: f64,
}

pub fn compute_metrics(coarse: &PoseSet, refined: &PoseSet, gt: &PoseSet, seed: ImageId) -> Result<Metrics, GeometryError> {
    let c = align_and_evaluate(coarse, gt)?;
    let r = align_and_evaluate(refined, gt)?;
    let per_image: Vec<ImageMetrics> = r
        .per_image
        .iter()
        .filter_map(|(id, re)| {
            let ce = c.per_image.get(id)?;
            Some(ImageMetrics {
                image_id: *id,
                coarse_rotation_deg: ce.rotation_deg,
                coarse_translation: ce.translation,
                refined_rotation_deg: re.rotation_deg,
                refined_translation: re.translation,
            })
        })
        .collect();
    let others: Vec<&ImageMetrics> = per_image.iter().filter(|m| m.image_id != seed).collect();
    let better = others.iter().filter(|m| m.refined_rotation_deg < m.coarse_rotation_deg).count();
    Ok(Metrics {
        coarse_mean_rotation_deg: c.mean_rotation_deg,
        coarse_mean_translation: c.mean_translation,
        refined_mean_rotation_deg: r.mean_rotation_deg,
        refined_mean_translation: r.mean_translation,
        refined_better_fraction: if others.is_empty() { 0.0 } else { better as f64 / others.len() as f64 },
        per_image,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub total_images: usize,
    pub registered: usize,
    pub unregistered: Vec<ImageId>,
    pub seed: ImageId,
    pub epochs: usize,
    pub status: RunStatus,
    pub registration_attempts: usize,
    pub registration_successes: usize,
    pub epoch_records: Vec<EpochRecord>,
    pub finalize: Option<SolveSummary>,
    pub metrics: Option<Metrics>,
    pub error: Option<StageError>,
    /// Wall-clock seconds per stage; excluded from the content hash.
    pub timings: BTreeMap<String, f64>,
    pub content_hash: String,
}

impl ReconstructionReport {
    /// SHA-256 over the report without timings and the pose file text.
    pub fn compute_hash(&self, poses: &PoseSet) -> String {
        let mut stripped = self.clone();
        stripped.timings.clear();
        stripped.content_hash.clear();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&stripped).expect("report serializes"));
        h.update(format_poses(poses).as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
