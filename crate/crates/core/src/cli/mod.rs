//! Command-line entry points: scene simulation, reconstruction, evaluation
//! and point export.

mod plot;
mod ply;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::geometry::posefile::{format_poses, read_poses};
use crate::geometry::{align_and_evaluate, GeometryError, PoseSet};
use crate::graph::{covis_descriptors, format_descriptors, read_descriptors};
use crate::pipeline::{format_events, run_full, PipelineConfig, RunStatus};
use crate::provider::{format_intrinsics, generate_scene, save_pointmap, FileProvider, PointmapProvider, SyntheticProvider};
use crate::tracks::{format_tracks, parse_track_points};
use crate::ImageId;

pub use plot::centers_svg;
pub use ply::format_ply;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "posefree", version, about = "Incremental pose-free reconstruction from dense pointmaps")]
pub struct Cli {
    /// TOML pipeline config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Scene and RANSAC seed. For `reconstruct` on a simulated scene only the
    /// RANSAC seed is overridden.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Log filter, e.g. `info` or `posefree=debug`.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: ground-truth poses, intrinsics,
    /// descriptors and optionally per-image pointmaps.
    Simulate {
        /// Also write `pointmaps/<id>.pmap` for every image.
        #[arg(long)]
        pointmaps: bool,
    },
    /// Reconstruct camera poses and sparse points.
    Reconstruct {
        /// A `simulate` output directory, or a directory with
        /// `intrinsics.txt`, `descriptors.txt` and `pointmaps/`.
        #[arg(long)]
        input: PathBuf,
        /// Read pointmaps from files even if the directory holds a scene.
        #[arg(long)]
        from_pointmaps: bool,
    },
    /// Compare a pose file against ground truth after similarity alignment.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write `centers.svg`.
        #[arg(long)]
        plot: bool,
    },
    /// Write the points of a track file as ASCII PLY.
    ExportPly {
        #[arg(long)]
        tracks: PathBuf,
        /// Defaults to `<out>/points.ply`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub scene: u64,
    pub ransac: u64,
}

/// Everything needed to repeat a command.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seeds: Seeds,
    /// Unix seconds; `SOURCE_DATE_EPOCH` when set.
    pub created: u64,
    pub config: PipelineConfig,
}

impl RunManifest {
    fn new(command: &str, inputs: Vec<PathBuf>, out_dir: &Path, config: &PipelineConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            inputs,
            out_dir: out_dir.to_path_buf(),
            seeds: Seeds {
                scene: config.seed,
                ransac: config.ransac.rng_seed,
            },
            created: timestamp(),
            config: config.clone(),
        }
    }
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else { return Ok(PipelineConfig::default()) };
    let text = read_file(path)?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).try_init();
    let result = match &cli.command {
        Command::Simulate { pointmaps } => simulate(&cli, *pointmaps).map(|_| EXIT_OK),
        Command::Reconstruct { input, from_pointmaps } => reconstruct(&cli, input, *from_pointmaps),
        Command::Evaluate { pred, gt, plot } => evaluate(&cli, pred, gt, *plot).map(|_| EXIT_OK),
        Command::ExportPly { tracks, output } => export_ply(&cli, tracks, output.as_deref()).map(|_| EXIT_OK),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        EXIT_ERROR
    })
}

fn simulate(cli: &Cli, pointmaps: bool) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.ransac.rng_seed = seed;
    }
    config.validate()?;
    create_out_dir(&cli.out)?;
    let inputs = cli.config.iter().cloned().collect();
    write_json(&cli.out.join("manifest.json"), &RunManifest::new("simulate", inputs, &cli.out, &config))?;

    let scene = generate_scene(&config.scene, config.seed)?;
    let descriptors = covis_descriptors(&scene, scene.scale() * config.covis_voxel)?;
    write_file(&cli.out.join("scene.toml"), toml::to_string(&config)?)?;
    write_file(&cli.out.join("gt_poses.txt"), format_poses(scene.gt_poses()))?;
    let intrinsics: BTreeMap<ImageId, _> = scene.image_ids().into_iter().map(|id| (id, *scene.intrinsics())).collect();
    write_file(&cli.out.join("intrinsics.txt"), format_intrinsics(&intrinsics))?;
    write_file(&cli.out.join("descriptors.txt"), format_descriptors(&descriptors))?;
    log::info!("simulated {} images", intrinsics.len());
    if pointmaps {
        let dir = cli.out.join("pointmaps");
        create_out_dir(&dir)?;
        let provider = SyntheticProvider::new(scene, config.provider.clone())?;
        for id in intrinsics.keys() {
            let (pm, _) = provider.query(*id, *id)?;
            save_pointmap(&pm, &FileProvider::pointmap_path(&cli.out, *id))?;
        }
    }
    Ok(())
}

fn reconstruct(cli: &Cli, input: &Path, from_pointmaps: bool) -> Result<i32> {
    let scene_path = input.join("scene.toml");
    let synthetic = !from_pointmaps && scene_path.is_file();
    let mut config = load_config(cli.config.as_deref())?;
    let mut inputs = vec![input.to_path_buf()];
    inputs.extend(cli.config.iter().cloned());
    if synthetic {
        let scene_config: PipelineConfig =
            toml::from_str(&read_file(&scene_path)?).with_context(|| format!("parsing {}", scene_path.display()))?;
        if cli.config.is_none() {
            config = scene_config.clone();
        }
        config.seed = scene_config.seed;
        config.scene = scene_config.scene;
        config.provider = scene_config.provider;
        config.covis_voxel = scene_config.covis_voxel;
    }
    if let Some(seed) = cli.seed {
        if !synthetic {
            config.seed = seed;
        }
        config.ransac.rng_seed = seed;
    }
    config.validate()?;
    create_out_dir(&cli.out)?;
    write_json(&cli.out.join("manifest.json"), &RunManifest::new("reconstruct", inputs, &cli.out, &config))?;

    let descriptors_path = input.join("descriptors.txt");
    let descriptors = read_descriptors(&descriptors_path)?;
    let mut provider: Box<dyn PointmapProvider> = if synthetic {
        let scene = generate_scene(&config.scene, config.seed)?;
        Box::new(SyntheticProvider::new(scene, config.provider.clone())?)
    } else {
        let mut p = FileProvider::open(input, config.provider.noise_sigma0)?;
        let gt_path = input.join("gt_poses.txt");
        if gt_path.is_file() {
            p = p.with_ground_truth(read_poses(&gt_path)?);
        }
        Box::new(p)
    };

    let (state, report) = run_full(&config, provider.as_mut(), &descriptors)?;
    write_file(&cli.out.join("poses.txt"), format_poses(&state.poses))?;
    write_file(&cli.out.join("coarse_poses.txt"), format_poses(&state.coarse))?;
    write_file(&cli.out.join("tracks.txt"), format_tracks(&state.tracks))?;
    let points: Vec<_> = state.tracks.iter().map(|t| t.point).collect();
    write_file(&cli.out.join("points.ply"), format_ply(&points))?;
    write_file(&cli.out.join("events.log"), format_events(&state.events))?;
    write_json(&cli.out.join("report.json"), &report)?;

    log::info!("registered {}/{} images, status {:?}", report.registered, report.total_images, report.status);
    if let Some(e) = &report.error {
        eprintln!("error: epoch {} {}: {}", e.epoch, e.stage, e.message);
        return Ok(EXIT_ERROR);
    }
    if report.status == RunStatus::Complete {
        return Ok(EXIT_OK);
    }
    let ids: Vec<String> = report.unregistered.iter().map(|id| id.to_string()).collect();
    eprintln!("partial reconstruction: unregistered images {}", ids.join(" "));
    Ok(EXIT_PARTIAL)
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageError {
    pub image_id: ImageId,
    pub rotation_deg: f64,
    pub translation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Alignment {
    pub scale: f64,
    /// `w x y z`
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

/// Output of `evaluate`.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub common_images: usize,
    pub missing_in_pred: Vec<ImageId>,
    pub missing_in_gt: Vec<ImageId>,
    pub mean_rotation_deg: f64,
    pub mean_translation: f64,
    pub per_image: Vec<ImageError>,
    /// Similarity mapping predicted centers onto ground truth.
    pub alignment: Alignment,
}

pub fn evaluate_poses(pred: &PoseSet, gt: &PoseSet) -> Result<EvaluationReport, GeometryError> {
    let e = align_and_evaluate(pred, gt)?;
    let q = e.alignment.rotation();
    let t = e.alignment.translation();
    Ok(EvaluationReport {
        common_images: e.per_image.len(),
        missing_in_pred: gt.keys().filter(|id| !pred.contains_key(id)).copied().collect(),
        missing_in_gt: pred.keys().filter(|id| !gt.contains_key(id)).copied().collect(),
        mean_rotation_deg: e.mean_rotation_deg,
        mean_translation: e.mean_translation,
        per_image: e
            .per_image
            .iter()
            .map(|(id, pe)| ImageError {
                image_id: *id,
                rotation_deg: pe.rotation_deg,
                translation: pe.translation,
            })
            .collect(),
        alignment: Alignment {
            scale: e.alignment.scale(),
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
        },
    })
}

fn evaluate(cli: &Cli, pred_path: &Path, gt_path: &Path, plot: bool) -> Result<()> {
    let pred = read_poses(pred_path)?;
    let gt = read_poses(gt_path)?;
    let report = match evaluate_poses(&pred, &gt) {
        Ok(r) => r,
        Err(GeometryError::TooFewCommon(n)) => {
            bail!("{} and {} share {n} image ids; at least 3 are needed", pred_path.display(), gt_path.display())
        }
        Err(e) => return Err(e.into()),
    };
    create_out_dir(&cli.out)?;
    write_json(&cli.out.join("metrics.json"), &report)?;
    if plot {
        let svg = centers_svg(&pred, &gt).context("plotting camera centers")?;
        write_file(&cli.out.join("centers.svg"), svg)?;
    }
    println!("{} images: mean rotation {:.6} deg, mean translation {:.6}", report.common_images, report.mean_rotation_deg, report.mean_translation);
    Ok(())
}

fn export_ply(cli: &Cli, tracks: &Path, output: Option<&Path>) -> Result<()> {
    let points = parse_track_points(&read_file(tracks)?, tracks)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            create_out_dir(&cli.out)?;
            cli.out.join("points.ply")
        }
    };
    write_file(&path, format_ply(&points))
}
