use nalgebra::{Matrix2x3, Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{p3p_solve, Correspondence, RansacConfig, RegistrationError};
use crate::geometry::{project, skew, Intrinsics, Pose, Quat, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub pose: Pose,
    pub inlier_count: usize,
    pub inliers: Vec<bool>,
    pub score: f64,
}

impl RegistrationResult {
    /// Result with no pose hypothesis: identity pose and no inliers.
    pub fn failed(n: usize) -> Self {
        Self {
            pose: Pose::identity(),
            inlier_count: 0,
            inliers: vec![false; n],
            score: 0.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reproj_error(pose: &Pose, c: &Correspondence, k: &Intrinsics) -> f64 {
    match project(k, pose, &c.point) {
        Ok(px) => (px - c.pixel).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Terms with a logit below this contribute under 1e-20 and are skipped.
const NEGLIGIBLE_LOGIT: f64 = -46.0;

/// `Σ sigmoid(α (1 - r_i / τ))`; points behind the camera contribute 0.
pub fn soft_inlier_score(pose: &Pose, corrs: &[Correspondence], k: &Intrinsics, tau: f64, alpha: f64) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let x = alpha * (1.0 - reproj_error(pose, c, k) / tau);
            if x > NEGLIGIBLE_LOGIT {
                sigmoid(x)
            } else {
                0.0
            }
        })
        .sum()
}

fn exp_so3(w: &Vec3) -> Quat {
    Quat::from_scaled_axis(*w)
}

/// Robust (Huber, 1 px) reprojection cost over `mask`.
fn masked_cost(pose: &Pose, corrs: &[Correspondence], mask: &[bool], k: &Intrinsics) -> f64 {
    corrs
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| {
            let r = reproj_error(pose, c, k);
            if !r.is_finite() {
                1e12
            } else if r <= 1.0 {
                0.5 * r * r
            } else {
                r - 0.5
            }
        })
        .sum()
}

/// One reweighted Gauss-Newton step on the masked reprojection errors.
/// Returns the new pose and the max-norm of the accepted update.
fn gauss_newton_step(pose: &Pose, corrs: &[Correspondence], mask: &[bool], k: &Intrinsics) -> Option<(Pose, f64)> {
    let mut h = Matrix6::<f64>::zeros();
    let mut g = Vector6::<f64>::zeros();
    for (c, _) in corrs.iter().zip(mask).filter(|(_, m)| **m) {
        let x = pose.transform_point(&c.point);
        if x.z <= 1e-9 {
            continue;
        }
        let p = k.project_camera(&x);
        let e = p - c.pixel;
        let r = e.norm();
        let w = if r <= 1.0 { 1.0 } else { 1.0 / r };
        let iz = 1.0 / x.z;
        let jp = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * x.x * iz * iz, 0.0, k.fy * iz, -k.fy * x.y * iz * iz);
        let jr = jp * (-skew(&x));
        let mut j = nalgebra::Matrix2x6::<f64>::zeros();
        j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jr);
        j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
        h += j.transpose() * j * w;
        g += j.transpose() * e * w;
    }
    let step = h.cholesky()?.solve(&(-g));
    let before = masked_cost(pose, corrs, mask, k);
    let mut scale = 1.0;
    for _ in 0..6 {
        let d = step * scale;
        let q = exp_so3(&Vec3::new(d[0], d[1], d[2]));
        let cand = Pose::new(q * pose.rotation(), q * pose.translation() + Vec3::new(d[3], d[4], d[5]));
        if masked_cost(&cand, corrs, mask, k) <= before {
            return Some((cand, d.amax()));
        }
        scale *= 0.5;
    }
    None
}

/// Up to `rounds` rounds of: select hard inliers (`r < τ`), take a
/// reweighted Gauss-Newton step on them. Stops once the update falls
/// below 1e-8.
pub fn refine_pnp(pose: &Pose, corrs: &[Correspondence], k: &Intrinsics, tau: f64, rounds: usize) -> Pose {
    let mut pose = *pose;
    for _ in 0..rounds {
        let mask: Vec<bool> = corrs.iter().map(|c| reproj_error(&pose, c, k) < tau).collect();
        if mask.iter().filter(|m| **m).count() < 4 {
            break;
        }
        match gauss_newton_step(&pose, corrs, &mask, k) {
            Some((p, change)) => {
                pose = p;
                if change < 1e-8 {
                    break;
                }
            }
            None => break,
        }
    }
    pose
}

fn sample_triple(rng: &mut ChaCha8Rng, n: usize) -> [usize; 3] {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let mut c = rng.random_range(0..n - 2);
    if c >= lo {
        c += 1;
    }
    if c >= hi {
        c += 1;
    }
    [a, b, c]
}

/// Hypothesize-and-verify PnP: P3P on seeded random triples, soft inlier
/// scoring, refinement of the best hypothesis on its hard inliers.
pub fn ransac_pnp(corrs: &[Correspondence], k: &Intrinsics, cfg: &RansacConfig) -> Result<RegistrationResult, RegistrationError> {
    if corrs.len() < 4 {
        return Err(RegistrationError::TooFewCorrespondences(corrs.len()));
    }
    let tau = cfg.reproj_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut best: Option<(f64, Pose)> = None;
    for _ in 0..cfg.hypothesis_count {
        for _ in 0..=cfg.max_resamples {
            let idx = sample_triple(&mut rng, corrs.len());
            let triple = [corrs[idx[0]], corrs[idx[1]], corrs[idx[2]]];
            let candidates = p3p_solve(&triple, k);
            if candidates.is_empty() {
                continue;
            }
            for pose in candidates {
                let score = soft_inlier_score(&pose, corrs, k, tau, cfg.inlier_alpha);
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    best = Some((score, pose));
                }
            }
            break;
        }
    }
    let Some((_, pose)) = best else {
        return Ok(RegistrationResult::failed(corrs.len()));
    };
    let pose = refine_pnp(&pose, corrs, k, tau, cfg.refine_rounds);
    let inliers: Vec<bool> = corrs.iter().map(|c| reproj_error(&pose, c, k) < tau).collect();
    Ok(RegistrationResult {
        pose,
        inlier_count: inliers.iter().filter(|m| **m).count(),
        inliers,
        score: soft_inlier_score(&pose, corrs, k, tau, cfg.inlier_alpha),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_angle, Vec2};
    use rand_distr::{Distribution, Normal};

    fn k() -> Intrinsics {
        Intrinsics::centered(300.0, 512, 512).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vec3::new(rng.random(), rng.random(), rng.random()) * 2.0 - Vec3::repeat(1.0);
        let c = Vec3::new(rng.random(), rng.random(), rng.random()) * 2.0 - Vec3::repeat(1.0);
        Pose::from_center(Quat::from_scaled_axis(axis * 2.0), c)
    }

    /// `n` correspondences on a 4-px grid seen by `pose`, a fraction of them
    /// replaced by uniform points in a box; pixel noise `sigma_px`.
    fn scene(rng: &mut impl Rng, pose: &Pose, n: usize, outliers: f64, sigma_px: f64) -> Vec<Correspondence> {
        let k = k();
        let side = (n as f64).sqrt().ceil() as u32;
        let noise = Normal::new(0.0, sigma_px.max(1e-300)).unwrap();
        let inv = pose.inverse();
        (0..n as u32)
            .map(|i| {
                let (col, row) = ((i % side) * 4 + 2, (i / side) * 4 + 2);
                let px = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
                let point = if rng.random_bool(outliers) {
                    Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))
                } else {
                    let depth = rng.random_range(1.0..5.0);
                    let observed = if sigma_px > 0.0 {
                        px + Vec2::new(noise.sample(rng), noise.sample(rng))
                    } else {
                        px
                    };
                    inv.transform_point(&(k.unproject(&observed) * depth))
                };
                Correspondence {
                    pixel: px,
                    point,
                    cell: (col, row),
                }
            })
            .collect()
    }

    #[test]
    fn score_examples_and_brute_force() {
        let k = k();
        let pose = Pose::identity();
        let c: Vec<Correspondence> = (0..10)
            .map(|i| {
                let x = Vec3::new(i as f64 * 0.1, 0.0, 2.0);
                Correspondence {
                    pixel: k.project_camera(&x),
                    point: x,
                    cell: (0, 0),
                }
            })
            .collect();
        assert!((soft_inlier_score(&pose, &c, &k, 6.0, 100.0) - 10.0 * sigmoid(100.0)).abs() < 1e-12);
        let shifted: Vec<Correspondence> = c.iter().map(|x| Correspondence { pixel: x.pixel + Vec2::new(6.0, 0.0), ..*x }).collect();
        assert!((soft_inlier_score(&pose, &shifted, &k, 6.0, 100.0) - 5.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let cs = scene(&mut rng, &pose, 50, 0.3, 3.0);
            let perturbed = Pose::new(*pose.rotation(), pose.translation() + Vec3::new(0.01, 0.0, 0.0));
            let (tau, alpha) = (rng.random_range(1.0..10.0), rng.random_range(1.0..200.0));
            let mut naive = 0.0;
            for c in &cs {
                let cam = perturbed.rotation_matrix() * c.point + perturbed.translation();
                if cam.z > crate::geometry::MIN_DEPTH {
                    let u = Vec2::new(k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy);
                    let r = (u - c.pixel).norm();
                    naive += 1.0 / (1.0 + (-alpha * (1.0 - r / tau)).exp());
                }
            }
            let fast = soft_inlier_score(&perturbed, &cs, &k, tau, alpha);
            assert!((fast - naive).abs() <= 1e-12 * naive.max(1.0), "{fast} vs {naive}");
        }
    }

    #[test]
    fn score_is_monotone_in_residual() {
        let k = k();
        let x = Vec3::new(0.0, 0.0, 3.0);
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let c = Correspondence {
                pixel: k.project_camera(&x) + Vec2::new(i as f64 * 0.3, 0.0),
                point: x,
                cell: (0, 0),
            };
            let s = soft_inlier_score(&Pose::identity(), &[c], &k, 6.0, 100.0);
            assert!(s <= prev);
            prev = s;
        }
        let behind = Correspondence {
            pixel: Vec2::new(256.0, 256.0),
            point: Vec3::new(0.0, 0.0, -3.0),
            cell: (0, 0),
        };
        assert_eq!(soft_inlier_score(&Pose::identity(), &[behind], &k, 6.0, 100.0), 0.0);
    }

    #[test]
    fn zero_noise_recovers_pose_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = RansacConfig::default();
        for _ in 0..10 {
            let pose = random_pose(&mut rng);
            let cs = scene(&mut rng, &pose, 2000, 0.0, 0.0);
            let r = ransac_pnp(&cs, &k(), &cfg).unwrap();
            assert!(rotation_angle(&(r.pose.rotation() * pose.rotation().inverse())).to_degrees() < 1e-4);
            assert!((r.pose.center() - pose.center()).norm() < 1e-6);
            assert_eq!(r.inlier_count, 2000);
            assert_eq!(r.inliers.iter().filter(|m| **m).count(), r.inlier_count);
        }
    }

    #[test]
    fn deterministic_and_mask_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&mut rng);
        let cs = scene(&mut rng, &pose, 3000, 0.3, 1.0);
        let cfg = RansacConfig { rng_seed: 9, ..Default::default() };
        let a = ransac_pnp(&cs, &k(), &cfg).unwrap();
        let b = ransac_pnp(&cs, &k(), &cfg).unwrap();
        assert_eq!(a, b);
        for (c, m) in cs.iter().zip(&a.inliers) {
            let r = reproj_error(&a.pose, c, &k());
            assert_eq!(*m, r < cfg.reproj_threshold);
        }
        assert!(a.score >= 0.0);
    }

    #[test]
    fn too_few_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cs = scene(&mut rng, &Pose::identity(), 3, 0.0, 0.0);
        assert!(matches!(ransac_pnp(&cs, &k(), &RansacConfig::default()), Err(RegistrationError::TooFewCorrespondences(3))));
    }

    #[test]
    fn error_shrinks_with_pixel_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng);
        let cfg = RansacConfig::default();
        let errs: Vec<f64> = [0.0, 0.1, 1.0]
            .iter()
            .map(|s| {
                let mut r2 = ChaCha8Rng::seed_from_u64(40);
                let cs = scene(&mut r2, &pose, 4000, 0.1, *s);
                let r = ransac_pnp(&cs, &k(), &cfg).unwrap();
                rotation_angle(&(r.pose.rotation() * pose.rotation().inverse())) + (r.pose.center() - pose.center()).norm()
            })
            .collect();
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
    }

    #[test]
    fn adding_exact_correspondences_never_lowers_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = RansacConfig::default();
        for _ in 0..5 {
            let pose = random_pose(&mut rng);
            let mut cs = scene(&mut rng, &pose, 1000, 0.3, 0.0);
            let before = ransac_pnp(&cs, &k(), &cfg).unwrap().inlier_count;
            let extra = scene(&mut rng, &pose, 200, 0.0, 0.0);
            cs.extend(extra);
            let after = ransac_pnp(&cs, &k(), &cfg).unwrap().inlier_count;
            assert!(after >= before, "{after} < {before}");
        }
    }

    #[test]
    fn all_outliers_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose(&mut rng);
        let cs = scene(&mut rng, &pose, 16_384, 1.0 - 1e-12, 0.0);
        let r = ransac_pnp(&cs, &k(), &RansacConfig::default()).unwrap();
        assert!(r.inlier_count < 5000, "{}", r.inlier_count);
    }
}
