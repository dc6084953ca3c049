//! Desk-scale synthetic scenes: a closed spherical room with an ellipsoidal
//! object in the middle, sampled as discrete surface points with stable ids
//! and observed by cameras on a configurable trajectory.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProviderError;
use crate::geometry::{Intrinsics, Pose, PoseSet, Quat, Vec3};
use crate::ImageId;

/// Nearest camera-frame depth at which a surface point counts as visible.
const NEAR: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// 360° ring around the object, cameras facing inward.
    Orbit,
    /// Small ring of cameras all facing forward at the object.
    ForwardRing,
    /// Cameras translating sideways while panning across the room; only
    /// neighbours along the sweep overlap, giving a chain-shaped graph.
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub trajectory: Trajectory,
    pub images: u32,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub room_radius: f64,
    /// Orbit radius, or distance of the forward/sweep camera plane from the object.
    pub camera_distance: f64,
    pub object_axes: [f64; 3],
    pub wall_points: u32,
    pub object_points: u32,
    /// Required overlap between trajectory neighbours, as a fraction of the
    /// smaller visible set.
    pub min_covisibility: f64,
    pub min_visible_points: u32,
    /// Extra cameras looking at the room's ceiling, which no trajectory camera sees.
    pub isolated_images: u32,
    /// Amplitude of the random perturbation of eye and target positions.
    pub jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            trajectory: Trajectory::Orbit,
            images: 20,
            width: 512,
            height: 512,
            focal: 300.0,
            room_radius: 4.0,
            camera_distance: 2.4,
            object_axes: [1.0, 0.7, 0.6],
            wall_points: 100_000,
            object_points: 70_000,
            min_covisibility: 0.3,
            min_visible_points: 500,
            isolated_images: 0,
            jitter: 0.05,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |m: String| Err(ProviderError::InvalidConfig(m));
        if self.images == 0 {
            return bad("scene needs at least one image".into());
        }
        if !(0.0..=1.0).contains(&self.min_covisibility) {
            return bad(format!("min_covisibility {} outside [0, 1]", self.min_covisibility));
        }
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive".into());
        }
        let max_axis = self.object_axes.iter().cloned().fold(0.0, f64::max);
        if self.object_axes.iter().any(|a| !(*a > 0.0)) {
            return bad("object axes must be positive".into());
        }
        if !(self.camera_distance > max_axis + NEAR && self.camera_distance + max_axis < self.room_radius) {
            return bad(format!(
                "cameras at distance {} must lie between the object (max axis {max_axis}) and the room wall ({})",
                self.camera_distance, self.room_radius
            ));
        }
        if self.wall_points == 0 {
            return bad("wall_points must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    config: SceneConfig,
    rng_seed: u64,
    surface_points: Vec<Vec3>,
    object_rotation: Quat,
    gt_poses: PoseSet,
    intrinsics: Intrinsics,
    visible: BTreeMap<ImageId, Vec<u32>>,
    /// Per image, `(cell index, surface point id)` of every occupied pixel.
    samples: BTreeMap<ImageId, Vec<(u32, u32)>>,
    trajectory_order: Vec<ImageId>,
    isolated: Vec<ImageId>,
}

fn fibonacci_sphere(n: u32, rng: &mut impl Rng) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = i as f64 * golden + phase;
            Vec3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

fn jitter_vec(rng: &mut impl Rng, amp: f64) -> Vec3 {
    if amp == 0.0 {
        return Vec3::zeros();
    }
    Vec3::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp), rng.random_range(-amp..amp))
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Builds a scene; identical `(config, rng_seed)` give identical scenes.
pub fn generate_scene(config: &SceneConfig, rng_seed: u64) -> Result<SyntheticScene, ProviderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let intrinsics = Intrinsics::centered(config.focal, config.width, config.height)
        .map_err(|e| ProviderError::InvalidConfig(e.to_string()))?;

    let object_rotation = Quat::from_euler_angles(0.35, 0.6, 0.15);
    let axes = Vec3::from(config.object_axes);
    let mut surface_points: Vec<Vec3> = fibonacci_sphere(config.wall_points, &mut rng)
        .into_iter()
        .map(|p| p * config.room_radius)
        .collect();
    surface_points.extend(
        fibonacci_sphere(config.object_points, &mut rng)
            .into_iter()
            .map(|p| object_rotation * p.component_mul(&axes)),
    );

    let n = config.images;
    let d = config.camera_distance;
    let up = Vec3::y();
    let mut gt_poses = PoseSet::new();
    let mut trajectory_order = Vec::new();
    for i in 0..n {
        let frac = i as f64 / n as f64;
        let (eye, target) = match config.trajectory {
            Trajectory::Orbit => {
                let theta = std::f64::consts::TAU * frac;
                let h = 0.3 * (2.0 * theta).sin();
                (Vec3::new(d * theta.cos(), h, d * theta.sin()), Vec3::zeros())
            }
            Trajectory::ForwardRing => {
                let theta = std::f64::consts::TAU * frac;
                let r = 0.25 * d;
                (Vec3::new(r * theta.cos(), r * theta.sin(), -d), Vec3::zeros())
            }
            Trajectory::Sweep => {
                let s = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
                let yaw = (-75.0 + 150.0 * s).to_radians();
                let eye = Vec3::new(-0.5 * d + d * s, 0.0, -d);
                (eye, eye + Vec3::new(yaw.sin(), 0.0, yaw.cos()))
            }
        };
        let eye = eye + jitter_vec(&mut rng, config.jitter);
        let target = target + jitter_vec(&mut rng, 2.0 * config.jitter);
        let id = ImageId(i);
        gt_poses.insert(id, Pose::look_at(eye, target, up));
        trajectory_order.push(id);
    }
    let mut isolated = Vec::new();
    for j in 0..config.isolated_images {
        let id = ImageId(n + j);
        let eye = Vec3::new(0.2 * j as f64, config.room_radius - 0.6, 0.0);
        gt_poses.insert(id, Pose::look_at(eye, eye + Vec3::y(), Vec3::z()));
        isolated.push(id);
    }

    let mut scene = SyntheticScene {
        config: config.clone(),
        rng_seed,
        surface_points,
        object_rotation,
        gt_poses,
        intrinsics,
        visible: BTreeMap::new(),
        samples: BTreeMap::new(),
        trajectory_order,
        isolated,
    };
    for (id, pose) in &scene.gt_poses {
        if scene.is_inside_object(&pose.center()) {
            return Err(ProviderError::InvalidConfig(format!("camera {id} lies inside the object")));
        }
    }
    let visible: BTreeMap<ImageId, Vec<u32>> = scene
        .gt_poses
        .iter()
        .map(|(id, pose)| (*id, scene.compute_visible(pose)))
        .collect();
    scene.samples = visible
        .iter()
        .map(|(id, vis)| (*id, scene.rasterize(&scene.gt_poses[id], vis)))
        .collect();
    scene.visible = visible;

    for (id, vis) in &scene.visible {
        if vis.len() < config.min_visible_points as usize {
            return Err(ProviderError::Unsatisfiable(format!(
                "image {id} sees {} surface points, fewer than the required {}",
                vis.len(),
                config.min_visible_points
            )));
        }
    }
    for (a, b) in scene.trajectory_neighbours() {
        let (va, vb) = (&scene.visible[&a], &scene.visible[&b]);
        let shared = sorted_intersection_len(va, vb);
        let frac = shared as f64 / va.len().min(vb.len()).max(1) as f64;
        if frac < config.min_covisibility {
            return Err(ProviderError::Unsatisfiable(format!(
                "images {a} and {b} share {:.3} of their points, below min_covisibility {}",
                frac, config.min_covisibility
            )));
        }
    }
    Ok(scene)
}

impl SyntheticScene {
    pub fn config(&self) -> &SceneConfig {
        &self.config
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn surface_points(&self) -> &[Vec3] {
        &self.surface_points
    }

    pub fn gt_poses(&self) -> &PoseSet {
        &self.gt_poses
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn image_ids(&self) -> Vec<ImageId> {
        self.gt_poses.keys().copied().collect()
    }

    /// Surface-point ids visible from `id`, ascending.
    pub fn visible(&self, id: ImageId) -> Option<&[u32]> {
        self.visible.get(&id).map(|v| v.as_slice())
    }

    /// `(cell index, surface point id)` of every occupied pixel of `id`,
    /// ascending by cell.
    pub fn samples(&self, id: ImageId) -> Option<&[(u32, u32)]> {
        self.samples.get(&id).map(|v| v.as_slice())
    }

    pub fn isolated(&self) -> &[ImageId] {
        &self.isolated
    }

    /// Scene scale used to express noise levels: the room radius.
    pub fn scale(&self) -> f64 {
        self.config.room_radius
    }

    /// Axis-aligned bounding box of all surface points.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let r = self.config.room_radius;
        (Vec3::repeat(-r), Vec3::repeat(r))
    }

    /// Consecutive trajectory pairs, wrapping around for closed rings.
    pub fn trajectory_neighbours(&self) -> Vec<(ImageId, ImageId)> {
        let ids = &self.trajectory_order;
        let mut pairs: Vec<_> = ids.windows(2).map(|w| (w[0], w[1])).collect();
        if ids.len() > 2 && self.config.trajectory != Trajectory::Sweep {
            pairs.push((ids[ids.len() - 1], ids[0]));
        }
        pairs
    }

    fn is_wall_point(&self, id: u32) -> bool {
        id < self.config.wall_points
    }

    fn to_object_unit(&self, x: &Vec3) -> Vec3 {
        (self.object_rotation.inverse() * x).component_div(&Vec3::from(self.config.object_axes))
    }

    fn is_inside_object(&self, x: &Vec3) -> bool {
        self.to_object_unit(x).norm_squared() <= 1.0
    }

    /// Whether the open segment `a → b` crosses the object.
    fn segment_hits_object(&self, a: &Vec3, b: &Vec3) -> bool {
        let p = self.to_object_unit(a);
        let q = self.to_object_unit(b);
        let d = q - p;
        let aa = d.norm_squared();
        let bb = 2.0 * p.dot(&d);
        let cc = p.norm_squared() - 1.0;
        let disc = bb * bb - 4.0 * aa * cc;
        if disc <= 0.0 {
            return false;
        }
        let s = disc.sqrt();
        let t0 = (-bb - s) / (2.0 * aa);
        let t1 = (-bb + s) / (2.0 * aa);
        t1 > 1e-9 && t0 < 1.0 - 1e-9
    }

    /// Assigns each pixel the visible point projecting closest to its
    /// center; ties go to the smaller id.
    fn rasterize(&self, pose: &Pose, visible: &[u32]) -> Vec<(u32, u32)> {
        let k = &self.intrinsics;
        let mut best: BTreeMap<u32, (f64, u32)> = BTreeMap::new();
        for &pid in visible {
            let p = k.project_camera(&pose.transform_point(&self.surface_points[pid as usize]));
            let (col, row) = (p.x.floor(), p.y.floor());
            let d2 = (p.x - col - 0.5).powi(2) + (p.y - row - 0.5).powi(2);
            let cell = row as u32 * k.width + col as u32;
            best.entry(cell)
                .and_modify(|b| {
                    if d2 < b.0 {
                        *b = (d2, pid)
                    }
                })
                .or_insert((d2, pid));
        }
        best.into_iter().map(|(cell, (_, pid))| (cell, pid)).collect()
    }

    fn compute_visible(&self, pose: &Pose) -> Vec<u32> {
        let k = &self.intrinsics;
        let c = pose.center();
        let axes2 = Vec3::from(self.config.object_axes).map(|a| a * a);
        let mut out = Vec::new();
        for (i, x) in self.surface_points.iter().enumerate() {
            let cam = pose.transform_point(x);
            if cam.z <= NEAR || !k.contains(&k.project_camera(&cam)) {
                continue;
            }
            let id = i as u32;
            let seen = if self.is_wall_point(id) {
                !self.segment_hits_object(&c, x)
            } else {
                let local = self.object_rotation.inverse() * x;
                let normal = self.object_rotation * local.component_div(&axes2);
                normal.dot(&(c - x)) > 1e-12
            };
            if seen {
                out.push(id);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trajectory: Trajectory) -> SceneConfig {
        SceneConfig {
            trajectory,
            images: 12,
            width: 128,
            height: 128,
            focal: 75.0,
            wall_points: 6000,
            object_points: 4000,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SceneConfig {
            images: 20,
            trajectory: Trajectory::ForwardRing,
            ..small(Trajectory::ForwardRing)
        };
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(a.surface_points, b.surface_points);
        assert_eq!(a.gt_poses, b.gt_poses);
        assert_eq!(a.visible, b.visible);
        let c = generate_scene(&cfg, 8).unwrap();
        assert_ne!(a.surface_points, c.surface_points);
    }

    #[test]
    fn invalid_covisibility_rejected() {
        let cfg = SceneConfig {
            min_covisibility: 1.1,
            ..small(Trajectory::Orbit)
        };
        assert!(matches!(generate_scene(&cfg, 1), Err(ProviderError::InvalidConfig(_))));
    }

    #[test]
    fn unsatisfiable_covisibility_rejected() {
        let cfg = SceneConfig {
            images: 3,
            min_covisibility: 0.95,
            ..small(Trajectory::Orbit)
        };
        assert!(matches!(generate_scene(&cfg, 1), Err(ProviderError::Unsatisfiable(_))));
    }

    #[test]
    fn neighbours_share_points_and_isolated_images_share_none() {
        for t in [Trajectory::Orbit, Trajectory::ForwardRing, Trajectory::Sweep] {
            let cfg = SceneConfig {
                isolated_images: 1,
                min_visible_points: 20,
                ..small(t)
            };
            let scene = generate_scene(&cfg, 3).unwrap();
            assert_eq!(scene.image_ids().len(), 13);
            let iso = scene.isolated()[0];
            let iso_vis = scene.visible(iso).unwrap();
            assert!(!iso_vis.is_empty());
            for id in scene.trajectory_order.iter() {
                assert_eq!(sorted_intersection_len(scene.visible(*id).unwrap(), iso_vis), 0, "{t:?}");
            }
        }
    }

    #[test]
    fn sweep_ends_do_not_overlap() {
        let scene = generate_scene(&small(Trajectory::Sweep), 5).unwrap();
        let first = scene.visible(ImageId(0)).unwrap();
        let last = scene.visible(ImageId(11)).unwrap();
        assert_eq!(sorted_intersection_len(first, last), 0);
    }

    #[test]
    fn visible_points_project_inside_and_in_front() {
        let scene = generate_scene(&small(Trajectory::Orbit), 9).unwrap();
        for (id, pose) in scene.gt_poses() {
            for &pid in scene.visible(*id).unwrap() {
                let p = crate::geometry::project(scene.intrinsics(), pose, &scene.surface_points()[pid as usize]).unwrap();
                assert!(scene.intrinsics().contains(&p));
            }
        }
    }
}
