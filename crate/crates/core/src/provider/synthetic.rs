use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Pointmap, PointmapProvider, ProviderConfig, ProviderError, ProviderState, SyntheticScene};
use crate::geometry::{Intrinsics, Pose, PoseSet, Vec3};
use crate::ImageId;

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 finalizer over a running hash
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn render(
    scene: &SyntheticScene,
    state: &ProviderState,
    frame: &Pose,
    id: ImageId,
    stream: u64,
) -> Result<Pointmap, ProviderError> {
    let samples = scene.samples(id).ok_or(ProviderError::UnknownImage(id))?;
    let pose = scene.gt_poses()[&id];
    let k = scene.intrinsics();
    let sigma = state.effective_sigma(id);
    let outliers = state.config().outlier_fraction;
    let (lo, hi) = scene.bounding_box();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(scene.rng_seed(), stream), state.observation_count(id) as u64));

    let mut pm = Pointmap::new(k.width, k.height, true, true);
    let points = scene.surface_points();
    for &(cell, pid) in samples {
        let x = points[pid as usize];
        let pixel = k.project_camera(&pose.transform_point(&x));
        let (p, corr) = if outliers > 0.0 && rng.random_bool(outliers) {
            let u = Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            (u, None)
        } else if sigma > 0.0 {
            let n = Vec3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            (x + n * sigma, Some(pid as u64))
        } else {
            (x, Some(pid as u64))
        };
        pm.set(cell as usize, frame.transform_point(&p), corr, Some(pixel));
    }
    Ok(pm)
}

/// Pointmaps of `reference` and `target` as the noisy regressor would
/// predict them, in the ground-truth world frame mapped by `frame`.
///
/// Noise depends only on the scene seed, the image pair, the role of the
/// image in the pair and its current observation count.
pub fn query_pointmaps(
    state: &ProviderState,
    scene: &SyntheticScene,
    frame: &Pose,
    reference: ImageId,
    target: ImageId,
) -> Result<(Pointmap, Pointmap), ProviderError> {
    for id in [reference, target] {
        if scene.samples(id).is_none() {
            return Err(ProviderError::UnknownImage(id));
        }
    }
    let pair = mix(mix(0, reference.0 as u64), target.0 as u64);
    let r = render(scene, state, frame, reference, mix(pair, 0))?;
    let t = render(scene, state, frame, target, mix(pair, 1))?;
    Ok((r, t))
}

pub struct SyntheticProvider {
    scene: SyntheticScene,
    state: ProviderState,
    frame: Pose,
}

impl SyntheticProvider {
    pub fn new(scene: SyntheticScene, config: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            scene,
            state: ProviderState::new(config)?,
            frame: Pose::identity(),
        })
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    pub fn state(&self) -> &ProviderState {
        &self.state
    }

    pub fn frame(&self) -> &Pose {
        &self.frame
    }
}

impl PointmapProvider for SyntheticProvider {
    fn image_ids(&self) -> Vec<ImageId> {
        self.scene.image_ids()
    }

    fn intrinsics(&self, id: ImageId) -> Result<Intrinsics, ProviderError> {
        if self.scene.gt_poses().contains_key(&id) {
            Ok(*self.scene.intrinsics())
        } else {
            Err(ProviderError::UnknownImage(id))
        }
    }

    fn query(&self, reference: ImageId, target: ImageId) -> Result<(Pointmap, Pointmap), ProviderError> {
        query_pointmaps(&self.state, &self.scene, &self.frame, reference, target)
    }

    fn observe(&mut self, ids: &[ImageId]) {
        self.state.observe(ids);
    }

    fn effective_sigma(&self, id: ImageId) -> f64 {
        self.state.effective_sigma(id)
    }

    fn set_frame(&mut self, frame: Pose) {
        self.frame = frame;
    }

    fn ground_truth(&self) -> Option<&PoseSet> {
        Some(self.scene.gt_poses())
    }

    fn scene_scale(&self) -> Option<f64> {
        Some(self.scene.scale())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::provider::{generate_scene, SceneConfig, Trajectory};

    fn scene() -> SyntheticScene {
        let cfg = SceneConfig {
            images: 8,
            width: 128,
            height: 96,
            focal: 80.0,
            wall_points: 8000,
            object_points: 6000,
            ..SceneConfig::default()
        };
        generate_scene(&cfg, 11).unwrap()
    }

    fn provider(sigma: f64, outliers: f64) -> SyntheticProvider {
        SyntheticProvider::new(
            scene(),
            ProviderConfig {
                noise_sigma0: sigma,
                outlier_fraction: outliers,
                attenuation: 0.7,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_points_are_exact_and_reproject() {
        let p = provider(0.0, 0.0);
        let (a, b) = (ImageId(0), ImageId(1));
        let (pa, pb) = p.query(a, b).unwrap();
        for (id, pm) in [(a, &pa), (b, &pb)] {
            let pose = p.scene().gt_poses()[&id];
            assert!(pm.valid_count() > 1000);
            for i in pm.valid_indices() {
                let x = pm.point(i);
                let c = pm.corr(i).unwrap();
                assert_eq!(*x, p.scene().surface_points()[c as usize]);
                let px = project(p.scene().intrinsics(), &pose, x).unwrap();
                assert!((px - pm.pixel(i)).norm() < 1e-6);
                let w = pm.width() as usize;
                assert_eq!((px.x.floor() as usize, px.y.floor() as usize), (i % w, i / w));
            }
        }
    }

    #[test]
    fn queries_are_deterministic_and_depend_on_observation() {
        let mut p = provider(0.05, 0.05);
        let q1 = p.query(ImageId(2), ImageId(3)).unwrap();
        let q2 = p.query(ImageId(2), ImageId(3)).unwrap();
        assert_eq!(q1.0.to_bytes(), q2.0.to_bytes());
        assert_eq!(q1.1.to_bytes(), q2.1.to_bytes());
        p.observe(&[ImageId(3)]);
        let q3 = p.query(ImageId(2), ImageId(3)).unwrap();
        assert_eq!(q1.0, q3.0);
        assert_ne!(q1.1, q3.1);
        assert!((p.effective_sigma(ImageId(3)) - 0.035).abs() < 1e-15);
        assert_eq!(p.effective_sigma(ImageId(2)), 0.05);
    }

    #[test]
    fn noise_level_matches_sigma() {
        let p = provider(0.02, 0.0);
        let (pm, _) = p.query(ImageId(4), ImageId(5)).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in pm.valid_indices() {
            let truth = p.scene().surface_points()[pm.corr(i).unwrap() as usize];
            sum += (pm.point(i) - truth).norm_squared();
            n += 3;
        }
        let est = (sum / n as f64).sqrt();
        assert!((est - 0.02).abs() < 0.02 * 0.05, "{est}");
    }

    #[test]
    fn frame_maps_every_point() {
        let mut p = provider(0.0, 0.0);
        let (before, _) = p.query(ImageId(0), ImageId(1)).unwrap();
        let frame = p.scene().gt_poses()[&ImageId(0)];
        p.set_frame(frame);
        let (after, _) = p.query(ImageId(0), ImageId(1)).unwrap();
        for i in before.valid_indices() {
            assert!((frame.transform_point(before.point(i)) - after.point(i)).norm() < 1e-12);
        }
    }

    #[test]
    fn unknown_image_is_an_error() {
        let p = provider(0.0, 0.0);
        assert!(matches!(p.query(ImageId(0), ImageId(99)), Err(ProviderError::UnknownImage(ImageId(99)))));
    }

    #[test]
    fn outlier_count_is_binomial() {
        // the outlier count over the valid pixels must stay within 3σ of the binomial mean
        let cfg = SceneConfig {
            images: 4,
            width: 128,
            height: 128,
            focal: 75.0,
            wall_points: 60_000,
            object_points: 40_000,
            trajectory: Trajectory::Orbit,
            min_covisibility: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 5).unwrap();
        let n = scene.samples(ImageId(0)).unwrap().len();
        assert!(n > 10_000);
        let p = 0.05;
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        let mut inside = 0;
        for seed_offset in 0..20u32 {
            let state = ProviderState::new(ProviderConfig {
                noise_sigma0: 0.0,
                outlier_fraction: p,
                attenuation: 1.0,
            })
            .unwrap();
            let (pm, _) = query_pointmaps(&state, &scene, &Pose::identity(), ImageId(0), ImageId(1 + seed_offset % 3)).unwrap();
            let outliers = pm.valid_indices().filter(|&i| pm.corr(i).is_none()).count();
            if (outliers as f64 - mean).abs() <= 3.0 * sd {
                inside += 1;
            }
        }
        assert!(inside >= 19, "{inside}/20 within 3 sigma");
    }
}
