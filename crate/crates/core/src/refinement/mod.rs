//! Pose and structure refinement with the robustified point-to-ray
//! consistency loss `Σ ρ(‖d ν - (X - C)‖)`.
//!
//! Cameras are parameterized by their center `C` and a world-frame rotation
//! increment `ω` acting on viewing rays (`ν ← exp(ω) ν`). The per-observation
//! scale `d` is eliminated in closed form.

mod solver;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, Intrinsics, Mat3, Pose, PoseSet, Quat, Vec2, Vec3};
use crate::tracks::Track;
use crate::ImageId;

pub use crate::geometry::backproject_ray;
pub use solver::{solve, SolveSummary, Termination};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("non-finite residual or Jacobian at observation {0}")]
    NonFinite(usize),
    #[error("no fixed camera: the gauge is unconstrained")]
    NoGauge,
    #[error("scale anchor references missing camera {0}")]
    BadAnchor(ImageId),
    #[error("observation {index} references camera {camera} or track {track} out of range")]
    BadIndex { index: usize, camera: usize, track: usize },
    #[error("need at least 2 registered images, got {0}")]
    TooFewImages(usize),
    #[error("no intrinsics for image {0}")]
    MissingIntrinsics(ImageId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub huber_delta: f64,
    pub max_iters: usize,
    pub anchor_weight: f64,
    pub optimize_rotations: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            huber_delta: 0.1,
            max_iters: 200,
            anchor_weight: 1e4,
            optimize_rotations: true,
        }
    }
}

/// Pixel observation of track `track` by camera `camera`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayObservation {
    pub track: usize,
    pub camera: usize,
    pub pixel: Vec2,
    /// Unit ray in the camera frame, fixed by the pixel.
    pub bearing: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineCamera {
    pub id: ImageId,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub fixed: bool,
}

/// Penalty `½ w (‖C_other - C_seed‖ - distance)²` on two camera indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAnchor {
    pub seed: usize,
    pub other: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineProblem {
    pub cameras: Vec<RefineCamera>,
    pub points: Vec<Vec3>,
    pub observations: Vec<RayObservation>,
    pub anchor: Option<ScaleAnchor>,
}

impl RefineProblem {
    pub fn new(cameras: Vec<RefineCamera>, points: Vec<Vec3>, anchor: Option<ScaleAnchor>) -> Self {
        Self {
            cameras,
            points,
            observations: Vec::new(),
            anchor,
        }
    }

    pub fn add_observation(&mut self, track: usize, camera: usize, pixel: Vec2) {
        let bearing = self.cameras[camera].intrinsics.unproject(&pixel).normalize();
        self.observations.push(RayObservation {
            track,
            camera,
            pixel,
            bearing,
        });
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        for (index, o) in self.observations.iter().enumerate() {
            if o.camera >= self.cameras.len() || o.track >= self.points.len() {
                return Err(RefineError::BadIndex {
                    index,
                    camera: o.camera,
                    track: o.track,
                });
            }
        }
        if let Some(a) = self.anchor {
            for c in [a.seed, a.other] {
                if c >= self.cameras.len() {
                    return Err(RefineError::BadAnchor(ImageId(c as u32)));
                }
            }
        }
        let free = self.cameras.iter().any(|c| !c.fixed);
        if free && !self.cameras.iter().any(|c| c.fixed) {
            return Err(RefineError::NoGauge);
        }
        Ok(())
    }

    /// World-frame ray of observation `o` under the current pose.
    pub fn ray(&self, o: &RayObservation) -> Vec3 {
        self.cameras[o.camera].pose.rotation().inverse() * o.bearing
    }

    /// Optimal non-negative scale of every observation.
    pub fn scales(&self) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| optimal_scale(&self.ray(o), &self.points[o.track], &self.cameras[o.camera].pose.center()))
            .collect()
    }

    /// Total robust cost including the anchor penalty.
    pub fn cost(&self, opts: &SolverOptions) -> f64 {
        let mut c: f64 = self
            .observations
            .iter()
            .map(|o| {
                let cam = &self.cameras[o.camera].pose;
                let nu = self.ray(o);
                let x = &self.points[o.track];
                let center = cam.center();
                let r = ray_residual(optimal_scale(&nu, x, &center), &nu, x, &center);
                huber(r.norm(), opts.huber_delta)
            })
            .sum();
        if let Some(a) = self.anchor {
            let e = anchor_error(self, &a);
            c += 0.5 * opts.anchor_weight * e * e;
        }
        c
    }
}

fn anchor_error(p: &RefineProblem, a: &ScaleAnchor) -> f64 {
    (p.cameras[a.other].pose.center() - p.cameras[a.seed].pose.center()).norm() - a.distance
}

/// `r = d ν - (X - C)`.
pub fn ray_residual(d: f64, nu: &Vec3, x: &Vec3, c: &Vec3) -> Vec3 {
    nu * d - (x - c)
}

/// `½ r²` up to `δ`, `δ (r - δ/2)` beyond.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    if r <= delta {
        r
    } else {
        delta
    }
}

/// IRLS weight `ρ'(r) / r`.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

/// `max(0, ν·(X - C))`, the minimizer of `‖d ν - (X - C)‖` over `d ≥ 0`.
pub fn optimal_scale(nu: &Vec3, x: &Vec3, c: &Vec3) -> f64 {
    nu.dot(&(x - c)).max(0.0)
}

/// Applies a parameter increment: rays rotate by `exp(ω)` in the world
/// frame and the center moves by `dc`.
pub fn perturb_pose(pose: &Pose, omega: &Vec3, dc: &Vec3) -> Pose {
    let q = *pose.rotation() * Quat::from_scaled_axis(-omega);
    Pose::from_center(q, pose.center() + dc)
}

/// Residual with its Jacobians with respect to `ω`, `C` and `X`, with the
/// scale re-optimized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualJacobian {
    pub residual: Vec3,
    pub d_omega: Mat3,
    pub d_center: Mat3,
    pub d_point: Mat3,
}

pub fn residual_jacobian(nu: &Vec3, x: &Vec3, c: &Vec3) -> ResidualJacobian {
    let v = x - c;
    let proj = nu.dot(&v);
    if proj > 0.0 {
        let p = Mat3::identity() - nu * nu.transpose();
        let dr_dnu = Mat3::identity() * proj + nu * v.transpose();
        ResidualJacobian {
            residual: nu * proj - v,
            d_omega: dr_dnu * (-skew(nu)),
            d_center: p,
            d_point: -p,
        }
    } else {
        ResidualJacobian {
            residual: -v,
            d_omega: Mat3::zeros(),
            d_center: Mat3::identity(),
            d_point: -Mat3::identity(),
        }
    }
}

/// Scale anchor between the seed image and another registered image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Anchor {
    pub seed: ImageId,
    pub other: ImageId,
    pub distance: f64,
}

fn build_problem(
    poses: &PoseSet,
    intrinsics: &BTreeMap<ImageId, Intrinsics>,
    tracks: &[Track],
    track_ids: &[usize],
    free: &BTreeSet<ImageId>,
    anchor: Option<Anchor>,
) -> Result<(RefineProblem, Vec<ImageId>), RefineError> {
    let ids: Vec<ImageId> = poses.keys().copied().collect();
    let index: BTreeMap<ImageId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let cameras = ids
        .iter()
        .map(|id| {
            Ok(RefineCamera {
                id: *id,
                pose: poses[id],
                intrinsics: *intrinsics.get(id).ok_or(RefineError::MissingIntrinsics(*id))?,
                fixed: !free.contains(id),
            })
        })
        .collect::<Result<Vec<_>, RefineError>>()?;
    let anchor = match anchor {
        Some(a) => {
            let seed = *index.get(&a.seed).ok_or(RefineError::BadAnchor(a.seed))?;
            let other = *index.get(&a.other).ok_or(RefineError::BadAnchor(a.other))?;
            // a penalty between two fixed cameras is constant
            (!cameras[seed].fixed || !cameras[other].fixed).then_some(ScaleAnchor {
                seed,
                other,
                distance: a.distance,
            })
        }
        None => None,
    };
    let mut problem = RefineProblem::new(cameras, track_ids.iter().map(|t| tracks[*t].point).collect(), anchor);
    for (ti, &t) in track_ids.iter().enumerate() {
        for o in &tracks[t].observations {
            if let Some(&ci) = index.get(&o.image_id) {
                problem.add_observation(ti, ci, o.pixel);
            }
        }
    }
    Ok((problem, ids))
}

fn write_back(problem: &RefineProblem, ids: &[ImageId], track_ids: &[usize], poses: &mut PoseSet, tracks: &mut [Track]) {
    for (cam, id) in problem.cameras.iter().zip(ids) {
        if !cam.fixed {
            poses.insert(*id, cam.pose);
        }
    }
    for (p, &t) in problem.points.iter().zip(track_ids) {
        tracks[t].point = *p;
    }
}

/// Refines the cameras in `new_ids` and the tracks they observe; all other
/// poses stay fixed. Returns `None` when there is nothing to refine.
pub fn refine_epoch(
    poses: &mut PoseSet,
    tracks: &mut [Track],
    intrinsics: &BTreeMap<ImageId, Intrinsics>,
    new_ids: &BTreeSet<ImageId>,
    anchor: Option<Anchor>,
    opts: &SolverOptions,
) -> Result<Option<SolveSummary>, RefineError> {
    let free: BTreeSet<ImageId> = new_ids.iter().filter(|id| poses.contains_key(id)).copied().collect();
    if free.is_empty() {
        return Ok(None);
    }
    let track_ids: Vec<usize> = (0..tracks.len())
        .filter(|t| tracks[*t].observations.iter().any(|o| free.contains(&o.image_id)))
        .collect();
    let (mut problem, ids) = build_problem(poses, intrinsics, tracks, &track_ids, &free, anchor)?;
    let summary = solve(&mut problem, opts)?;
    write_back(&problem, &ids, &track_ids, poses, tracks);
    Ok(Some(summary))
}

/// Global pass: every pose except the seed's is free, as are all track points.
pub fn finalize(
    poses: &mut PoseSet,
    tracks: &mut [Track],
    intrinsics: &BTreeMap<ImageId, Intrinsics>,
    seed: ImageId,
    anchor: Option<Anchor>,
    opts: &SolverOptions,
) -> Result<SolveSummary, RefineError> {
    if poses.len() < 2 {
        return Err(RefineError::TooFewImages(poses.len()));
    }
    let free: BTreeSet<ImageId> = poses.keys().filter(|id| **id != seed).copied().collect();
    let track_ids: Vec<usize> = (0..tracks.len()).collect();
    let (mut problem, ids) = build_problem(poses, intrinsics, tracks, &track_ids, &free, anchor)?;
    let summary = solve(&mut problem, opts)?;
    write_back(&problem, &ids, &track_ids, poses, tracks);
    Ok(summary)
}

#[cfg(test)]
mod tests;
