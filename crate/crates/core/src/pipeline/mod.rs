//! Incremental reconstruction driver: seed initialization, registration
//! epochs with per-epoch refinement, finalization and evaluation.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Pose, PoseSet, Quat, SimTransform, Vec3};
use crate::graph::{build_graph, select_reference_excluding, select_seed, Descriptor, GraphError, SimilarityGraph};
use crate::provider::{Pointmap, PointmapProvider, ProviderConfig, ProviderError, SceneConfig};
use crate::refinement::{finalize, refine_epoch, Anchor, RefineError, SolveSummary, SolverOptions};
use crate::registration::{build_correspondences, ransac_pnp, register_pointmap, RansacConfig, RegistrationError, RegistrationOutcome};
use crate::tracks::{build_tracks, filter_ambiguous, flatten, limit_length, propose_matches, subsample, MatchMode, ObservationSet, Track, TrackError};
use crate::ImageId;

pub use report::{
    compute_metrics, format_events, EpochRecord, Event, ImageMetrics, Metrics, ReconstructionReport, RunStatus, Stage, StageError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("no images to reconstruct")]
    NoImages,
    #[error("no descriptor for image {0}")]
    MissingDescriptor(ImageId),
    #[error("could not anchor the frame on seed image {0}")]
    SeedFrame(ImageId),
    #[error("nothing left to register")]
    AllRegistered,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Tracks(#[from] TrackError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackMode {
    /// Oracle when every pointmap carries surface ids, proximity otherwise.
    Auto,
    Oracle,
    Proximity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    pub mode: TrackMode,
    /// Match radius of proximity mode, in scene units.
    pub radius: f64,
    pub downsample: u32,
    pub max_tracks: usize,
    pub max_length: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            mode: TrackMode::Auto,
            radius: 0.02,
            downsample: 8,
            max_tracks: 4000,
            max_length: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed of the synthetic scene.
    pub seed: u64,
    pub s_sim: f64,
    pub downsample: u32,
    pub max_epochs: usize,
    /// Provider observation rounds per epoch for every registered image.
    pub observation_rounds: u32,
    /// Most images accepted per epoch; 0 means unlimited.
    pub max_batch: usize,
    /// Voxel size of co-visibility descriptors as a fraction of the scene scale.
    pub covis_voxel: f64,
    pub ransac: RansacConfig,
    pub solver: SolverOptions,
    pub tracks: TrackConfig,
    pub provider: ProviderConfig,
    pub scene: SceneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            s_sim: crate::graph::DEFAULT_S_SIM,
            downsample: 4,
            max_epochs: 50,
            observation_rounds: 1,
            max_batch: 0,
            covis_voxel: 1.0 / 6.0,
            ransac: RansacConfig::default(),
            solver: SolverOptions::default(),
            tracks: TrackConfig::default(),
            provider: ProviderConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.s_sim) {
            return bad(format!("s_sim {} outside [0, 1]", self.s_sim));
        }
        if self.downsample < 1 || self.tracks.downsample < 1 {
            return bad("downsample must be >= 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be >= 1".into());
        }
        if !(self.covis_voxel > 0.0) {
            return bad("covis_voxel must be > 0".into());
        }
        if !(self.solver.huber_delta > 0.0) || !(self.solver.anchor_weight > 0.0) {
            return bad("huber_delta and anchor_weight must be > 0".into());
        }
        if self.tracks.max_length < 2 {
            return bad("tracks.max_length must be >= 2".into());
        }
        self.ransac.validate()?;
        self.provider.validate()?;
        self.scene.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReconstructionState {
    pub graph: SimilarityGraph,
    pub seed: ImageId,
    pub epoch: usize,
    pub image_ids: Vec<ImageId>,
    pub intrinsics: BTreeMap<ImageId, Intrinsics>,
    /// Epoch in which each registered image was registered.
    pub registration_epoch: BTreeMap<ImageId, usize>,
    pub order: Vec<ImageId>,
    pub reference_of: BTreeMap<ImageId, ImageId>,
    pub coarse: PoseSet,
    pub poses: PoseSet,
    pub tracks: Vec<Track>,
    pub anchor: Option<Anchor>,
    /// `(reference, target)` pairs that failed the inlier gate.
    pub failed: BTreeSet<(ImageId, ImageId)>,
    pub attempts: usize,
    pub events: Vec<Event>,
    pub epoch_records: Vec<EpochRecord>,
    pub finalize: Option<SolveSummary>,
    pub timings: BTreeMap<String, f64>,
}

impl ReconstructionState {
    pub fn registered(&self) -> BTreeSet<ImageId> {
        self.registration_epoch.keys().copied().collect()
    }

    pub fn unregistered(&self) -> BTreeSet<ImageId> {
        self.image_ids.iter().filter(|id| !self.registration_epoch.contains_key(id)).copied().collect()
    }

    fn log(&mut self, stage: Stage, image_id: Option<ImageId>, outcome: &str, value: f64) {
        let event = Event {
            epoch: self.epoch,
            stage,
            image_id,
            outcome: outcome.to_string(),
            value,
        };
        log::debug!("{event}");
        self.events.push(event);
    }

    fn time(&mut self, stage: Stage, start: Instant) {
        *self.timings.entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
    }

    fn register(&mut self, id: ImageId, reference: ImageId, pose: Pose) {
        self.registration_epoch.insert(id, self.epoch);
        self.order.push(id);
        self.reference_of.insert(id, reference);
        self.coarse.insert(id, pose);
        self.poses.insert(id, pose);
    }
}

/// Result of one registration epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum EpochOutcome {
    Registered(Vec<ImageId>),
    /// No registered image has an untried edge to an unregistered one.
    FrontierExhausted,
    Complete,
}

fn observe_buffer(state: &mut ReconstructionState, provider: &mut dyn PointmapProvider, rounds: u32) {
    let buffer: Vec<ImageId> = state.registration_epoch.keys().copied().collect();
    for _ in 0..rounds {
        provider.observe(&buffer);
    }
    state.log(Stage::Observe, None, "rounds", rounds as f64);
}

/// Builds the similarity graph, selects the seed and re-expresses the
/// provider in the seed camera's frame so that the seed pose is the identity.
///
/// The provider must not have been reframed before.
pub fn initialize_seed(
    config: &PipelineConfig,
    provider: &mut dyn PointmapProvider,
    descriptors: &[Descriptor],
) -> Result<ReconstructionState, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let image_ids = provider.image_ids();
    if image_ids.is_empty() {
        return Err(PipelineError::NoImages);
    }
    let have: BTreeSet<ImageId> = descriptors.iter().map(|d| d.image_id()).collect();
    if let Some(id) = image_ids.iter().find(|id| !have.contains(id)) {
        return Err(PipelineError::MissingDescriptor(*id));
    }
    let wanted: BTreeSet<ImageId> = image_ids.iter().copied().collect();
    let used: Vec<Descriptor> = descriptors.iter().filter(|d| wanted.contains(&d.image_id())).cloned().collect();
    let graph = build_graph(&used, config.s_sim)?;
    let seed = select_seed(&graph)?;
    let intrinsics = image_ids
        .iter()
        .map(|id| Ok((*id, provider.intrinsics(*id)?)))
        .collect::<Result<BTreeMap<_, _>, ProviderError>>()?;

    // The seed's own pointmap fixes the frame: its camera becomes the world.
    let (_, pm) = provider.query(seed, seed)?;
    let corrs = build_correspondences(&pm, config.downsample);
    let seed_frame = match ransac_pnp(&corrs, &intrinsics[&seed], &config.ransac) {
        Ok(r) if r.inlier_count > config.ransac.min_inliers => r.pose,
        _ => return Err(PipelineError::SeedFrame(seed)),
    };
    provider.set_frame(seed_frame);

    let mut state = ReconstructionState {
        graph,
        seed,
        epoch: 0,
        image_ids,
        intrinsics,
        registration_epoch: BTreeMap::new(),
        order: Vec::new(),
        reference_of: BTreeMap::new(),
        coarse: PoseSet::new(),
        poses: PoseSet::new(),
        tracks: Vec::new(),
        anchor: None,
        failed: BTreeSet::new(),
        attempts: 0,
        events: Vec::new(),
        epoch_records: Vec::new(),
        finalize: None,
        timings: BTreeMap::new(),
    };
    state.register(seed, seed, Pose::identity());
    let degree = state.graph.degree(seed) as f64;
    state.log(Stage::Seed, Some(seed), "selected", degree);
    log::info!("seed image {seed} with {degree} graph neighbours");
    observe_buffer(&mut state, provider, config.observation_rounds);
    state.time(Stage::Seed, start);
    Ok(state)
}

fn rebuild_tracks(
    state: &ReconstructionState,
    config: &PipelineConfig,
    provider: &dyn PointmapProvider,
    fresh: &BTreeMap<ImageId, Pointmap>,
) -> Result<Vec<Track>, PipelineError> {
    let mut sets = Vec::with_capacity(state.registration_epoch.len());
    for id in state.registration_epoch.keys() {
        let set = match fresh.get(id) {
            Some(pm) => ObservationSet::from_pointmap(*id, pm, config.tracks.downsample),
            None => {
                let (_, pm) = provider.query(state.reference_of[id], *id)?;
                ObservationSet::from_pointmap(*id, &pm, config.tracks.downsample)
            }
        };
        sets.push(set);
    }
    let mode = match config.tracks.mode {
        TrackMode::Oracle => MatchMode::Oracle,
        TrackMode::Proximity => MatchMode::Proximity { radius: config.tracks.radius },
        TrackMode::Auto if sets.iter().all(|s| s.corr_ids.is_some()) => MatchMode::Oracle,
        TrackMode::Auto => MatchMode::Proximity { radius: config.tracks.radius },
    };
    let adjacent = |a: ImageId, b: ImageId| state.graph.weight(a, b).is_some();
    let pairs = propose_matches(&sets, mode, &adjacent)?;
    let tracks = filter_ambiguous(build_tracks(&flatten(&sets), &pairs));
    let tracks = subsample(limit_length(tracks, config.tracks.max_length), config.tracks.max_tracks);
    Ok(tracks
        .into_iter()
        .enumerate()
        .map(|(i, mut t)| {
            t.id = i;
            t
        })
        .collect())
}

/// One registration epoch: pick a reference, register its unregistered
/// neighbours, rebuild tracks, refine the new cameras and observe the buffer.
pub fn run_epoch(
    state: &mut ReconstructionState,
    config: &PipelineConfig,
    provider: &mut dyn PointmapProvider,
) -> Result<EpochOutcome, PipelineError> {
    let unregistered = state.unregistered();
    if unregistered.is_empty() {
        return Ok(EpochOutcome::Complete);
    }
    let start = Instant::now();
    let registered = state.registered();
    let reference = match select_reference_excluding(&state.graph, &registered, &unregistered, &state.failed) {
        Ok(r) => r,
        Err(GraphError::FrontierExhausted) => return Ok(EpochOutcome::FrontierExhausted),
        Err(e) => return Err(e.into()),
    };
    state.epoch += 1;
    let mut candidates: Vec<(ImageId, f64)> = state
        .graph
        .neighbors(reference)
        .filter(|(b, _)| unregistered.contains(b) && !state.failed.contains(&(reference, *b)))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    state.log(Stage::Reference, Some(reference), "selected", candidates.len() as f64);
    state.time(Stage::Reference, start);

    let start = Instant::now();
    let mut attempted = Vec::new();
    let mut new_ids = Vec::new();
    let mut fresh = BTreeMap::new();
    for (target, _) in candidates {
        if config.max_batch > 0 && new_ids.len() >= config.max_batch {
            break;
        }
        attempted.push(target);
        state.attempts += 1;
        let (_, pm) = provider.query(reference, target)?;
        let outcome = register_pointmap(target, reference, &pm, &state.intrinsics[&target], &config.ransac, config.downsample)?;
        let inliers = outcome.result().inlier_count as f64;
        match outcome {
            RegistrationOutcome::Accepted(r) => {
                state.register(target, reference, r.pose);
                state.log(Stage::Register, Some(target), "accepted", inliers);
                fresh.insert(target, pm);
                new_ids.push(target);
            }
            RegistrationOutcome::Rejected(_) => {
                state.failed.insert((reference, target));
                state.log(Stage::Register, Some(target), "rejected", inliers);
            }
        }
    }
    state.time(Stage::Register, start);

    let mut record = EpochRecord {
        epoch: state.epoch,
        reference,
        attempted,
        registered: new_ids.clone(),
        tracks: 0,
        refine: None,
    };
    if !new_ids.is_empty() {
        if state.anchor.is_none() {
            let among: BTreeSet<ImageId> = new_ids.iter().copied().collect();
            if let Some(other) = state.graph.most_similar(state.seed, &among) {
                let distance = (state.poses[&other].center() - state.poses[&state.seed].center()).norm();
                state.anchor = Some(Anchor {
                    seed: state.seed,
                    other,
                    distance,
                });
            }
        }
        let start = Instant::now();
        state.tracks = rebuild_tracks(state, config, provider, &fresh)?;
        record.tracks = state.tracks.len();
        let n = state.tracks.len() as f64;
        state.log(Stage::Tracks, None, "built", n);
        state.time(Stage::Tracks, start);

        let start = Instant::now();
        let new_set: BTreeSet<ImageId> = new_ids.iter().copied().collect();
        let summary = refine_epoch(
            &mut state.poses,
            &mut state.tracks,
            &state.intrinsics,
            &new_set,
            state.anchor,
            &config.solver,
        )?;
        if let Some(s) = &summary {
            state.log(Stage::Refine, None, "cost", s.final_cost);
        }
        record.refine = summary;
        state.time(Stage::Refine, start);
    }
    log::info!(
        "epoch {}: reference {reference}, registered {}/{} ({} total)",
        state.epoch,
        new_ids.len(),
        record.attempted.len(),
        state.registration_epoch.len()
    );
    state.epoch_records.push(record);
    observe_buffer(state, provider, config.observation_rounds);
    Ok(EpochOutcome::Registered(new_ids))
}

/// Moves the camera-center centroid to the origin and scales the mean
/// center norm to 1, applying the same similarity to coarse poses and track
/// points. Returns the applied transform.
pub fn normalize_reconstruction(state: &mut ReconstructionState) -> SimTransform {
    if state.poses.is_empty() {
        return SimTransform::identity();
    }
    let centers: Vec<Vec3> = state.poses.values().map(|p| p.center()).collect();
    let centroid = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let spread = centers.iter().map(|c| (c - centroid).norm()).sum::<f64>() / centers.len() as f64;
    let scale = if spread > 0.0 && spread.is_finite() { 1.0 / spread } else { 1.0 };
    let sim = SimTransform::new(scale, Quat::identity(), -centroid * scale).expect("positive finite scale");
    for p in state.poses.values_mut().chain(state.coarse.values_mut()) {
        *p = p.transformed_by(&sim);
    }
    for t in &mut state.tracks {
        t.point = sim.apply(&t.point);
    }
    sim
}

fn stage_error(epoch: usize, stage: Stage, e: impl std::fmt::Display) -> StageError {
    StageError {
        epoch,
        stage,
        message: e.to_string(),
    }
}

/// Runs seed initialization, epochs until every image is registered, the
/// frontier is exhausted or `max_epochs` is reached, then finalization,
/// normalization and (with ground truth) evaluation.
///
/// Errors after initialization are recorded in the report, which is
/// returned with the partial state.
pub fn run_full(
    config: &PipelineConfig,
    provider: &mut dyn PointmapProvider,
    descriptors: &[Descriptor],
) -> Result<(ReconstructionState, ReconstructionReport), PipelineError> {
    let mut state = initialize_seed(config, provider, descriptors)?;
    let mut error = None;
    let mut status = RunStatus::MaxEpochs;
    while state.epoch < config.max_epochs {
        match run_epoch(&mut state, config, provider) {
            Ok(EpochOutcome::Registered(_)) => {}
            Ok(EpochOutcome::Complete) => {
                status = RunStatus::Complete;
                break;
            }
            Ok(EpochOutcome::FrontierExhausted) => {
                status = RunStatus::FrontierExhausted;
                break;
            }
            Err(e) => {
                error = Some(stage_error(state.epoch, Stage::Register, e));
                status = RunStatus::Failed;
                break;
            }
        }
    }
    if status == RunStatus::MaxEpochs && state.unregistered().is_empty() {
        status = RunStatus::Complete;
    }

    if error.is_none() && state.poses.len() >= 2 {
        let start = Instant::now();
        match finalize(&mut state.poses, &mut state.tracks, &state.intrinsics, state.seed, state.anchor, &config.solver) {
            Ok(s) => {
                state.log(Stage::Finalize, None, "cost", s.final_cost);
                log::info!("finalize: cost {:.3e} -> {:.3e} in {} iterations", s.initial_cost, s.final_cost, s.iterations);
                state.finalize = Some(s);
            }
            Err(e) => {
                error = Some(stage_error(state.epoch, Stage::Finalize, e));
                status = RunStatus::Failed;
            }
        }
        state.time(Stage::Finalize, start);
    }

    let start = Instant::now();
    let sim = normalize_reconstruction(&mut state);
    state.log(Stage::Normalize, None, "scale", sim.scale());
    state.time(Stage::Normalize, start);

    let start = Instant::now();
    let metrics = match provider.ground_truth() {
        Some(gt) if state.poses.len() >= 3 => match compute_metrics(&state.coarse, &state.poses, gt, state.seed) {
            Ok(m) => Some(m),
            Err(e) => {
                error.get_or_insert(stage_error(state.epoch, Stage::Evaluate, e));
                None
            }
        },
        _ => None,
    };
    if let Some(m) = &metrics {
        state.log(Stage::Evaluate, None, "mean_rotation_deg", m.refined_mean_rotation_deg);
    }
    state.time(Stage::Evaluate, start);

    let successes = state.registration_epoch.len() - 1;
    let mut report = ReconstructionReport {
        total_images: state.image_ids.len(),
        registered: state.registration_epoch.len(),
        unregistered: state.unregistered().into_iter().collect(),
        seed: state.seed,
        epochs: state.epoch,
        status,
        registration_attempts: state.attempts,
        registration_successes: successes,
        epoch_records: state.epoch_records.clone(),
        finalize: state.finalize.clone(),
        metrics,
        error,
        timings: state.timings.clone(),
        content_hash: String::new(),
    };
    report.content_hash = report.compute_hash(&state.poses);
    Ok((state, report))
}
