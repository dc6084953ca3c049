use std::collections::{BTreeMap, BTreeSet};

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::geometry::{project, rotation_angle};
use crate::tracks::Observation;

fn intr() -> Intrinsics {
    Intrinsics::centered(300.0, 512, 512).unwrap()
}

struct Toy {
    poses: Vec<Pose>,
    points: Vec<Vec3>,
}

fn toy(n_cams: usize, n_pts: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses = (0..n_cams)
        .map(|i| {
            let a = i as f64 * 0.35;
            let eye = Vec3::new(3.0 * a.sin(), 0.2 * (i as f64).cos(), -3.0 * a.cos());
            Pose::look_at(eye, Vec3::zeros(), Vec3::y())
        })
        .collect();
    let points = (0..n_pts)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    Toy { poses, points }
}

fn problem_from(t: &Toy, noise_px: f64, fixed: &[usize], seed: u64) -> RefineProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise_px.max(1e-300)).unwrap();
    let cams = t
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| RefineCamera {
            id: ImageId(i as u32),
            pose: *p,
            intrinsics: intr(),
            fixed: fixed.contains(&i),
        })
        .collect();
    let mut prob = RefineProblem::new(cams, t.points.clone(), None);
    for (ti, x) in t.points.iter().enumerate() {
        for (ci, p) in t.poses.iter().enumerate() {
            let mut px = project(&intr(), p, x).unwrap();
            if noise_px > 0.0 {
                px += Vec2::new(n.sample(&mut rng), n.sample(&mut rng));
            }
            prob.add_observation(ti, ci, px);
        }
    }
    prob
}

fn perturb_all(prob: &mut RefineProblem, deg: f64, frac: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
    for c in prob.cameras.iter_mut().filter(|c| !c.fixed) {
        let dist = c.pose.center().norm();
        c.pose = perturb_pose(&c.pose, &(unit() * deg.to_radians()), &(unit() * frac * dist));
    }
    for x in prob.points.iter_mut() {
        *x += unit() * frac * 3.0;
    }
}

fn baseline(prob: &RefineProblem, a: usize, b: usize) -> f64 {
    (prob.cameras[a].pose.center() - prob.cameras[b].pose.center()).norm()
}

#[test]
fn backproject_examples() {
    let k = Intrinsics::centered(100.0, 200, 200).unwrap();
    let id = Pose::identity();
    assert_relative_eq!(backproject_ray(&k, &id, &Vec2::new(100.0, 100.0)), Vec3::z(), epsilon = 1e-15);
    let r = backproject_ray(&k, &id, &Vec2::new(200.0, 100.0));
    assert_relative_eq!(r, Vec3::new(1.0, 0.0, 1.0).normalize(), epsilon = 1e-15);
    // camera at (0,0,-5) looking at the origin: principal ray is +z in world
    let p = Pose::look_at(Vec3::new(0.0, 0.0, -5.0), Vec3::zeros(), Vec3::y());
    assert_relative_eq!(backproject_ray(&k, &p, &Vec2::new(100.0, 100.0)), Vec3::z(), epsilon = 1e-12);
}

#[test]
fn residual_and_loss_examples() {
    let nu = Vec3::z();
    let x = Vec3::new(0.3, 0.0, 2.0);
    let c = Vec3::zeros();
    assert_eq!(optimal_scale(&nu, &x, &c), 2.0);
    assert_relative_eq!(ray_residual(2.0, &nu, &x, &c), Vec3::new(-0.3, 0.0, 0.0));
    // point behind the camera
    assert_eq!(optimal_scale(&nu, &Vec3::new(0.0, 0.0, -1.0), &c), 0.0);
    assert_relative_eq!(huber(0.05, 0.1), 0.00125);
    assert_relative_eq!(huber(0.3, 0.1), 0.025);
    assert_relative_eq!(huber_derivative(0.3, 0.1), 0.1);
    assert_relative_eq!(huber_weight(0.4, 0.1), 0.25);
    assert_eq!(huber_weight(0.1, 0.1), 1.0);
}

#[test]
fn optimal_scale_beats_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let nu = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let x = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let d = optimal_scale(&nu, &x, &c);
        let best = ray_residual(d, &nu, &x, &c).norm();
        for k in 0..=2000 {
            let g = k as f64 * 0.005;
            assert!(best <= ray_residual(g, &nu, &x, &c).norm() + 1e-12);
        }
    }
}

fn numeric_jacobians(nu: &Vec3, x: &Vec3, c: &Vec3) -> (Mat3, Mat3, Mat3) {
    let h = 1e-6;
    let res = |nu: &Vec3, x: &Vec3, c: &Vec3| ray_residual(optimal_scale(nu, x, c), nu, x, c);
    let mut jo = Mat3::zeros();
    let mut jc = Mat3::zeros();
    let mut jx = Mat3::zeros();
    for i in 0..3 {
        let e = Vec3::ith(i, h);
        let np = Quat::from_scaled_axis(e) * nu;
        let nm = Quat::from_scaled_axis(-e) * nu;
        jo.set_column(i, &((res(&np, x, c) - res(&nm, x, c)) / (2.0 * h)));
        jc.set_column(i, &((res(nu, x, &(c + e)) - res(nu, x, &(c - e))) / (2.0 * h)));
        jx.set_column(i, &((res(nu, &(x + e), c) - res(nu, &(x - e), c)) / (2.0 * h)));
    }
    (jo, jc, jx)
}

#[test]
fn jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let nu = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let x = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let c = Vec3::zeros();
        if nu.dot(&x).abs() < 1e-3 {
            continue;
        }
        let rj = residual_jacobian(&nu, &x, &c);
        let (jo, jc, jx) = numeric_jacobians(&nu, &x, &c);
        assert_relative_eq!(rj.d_omega, jo, epsilon = 1e-6);
        assert_relative_eq!(rj.d_center, jc, epsilon = 1e-6);
        assert_relative_eq!(rj.d_point, jx, epsilon = 1e-6);
    }
}

#[test]
fn perturb_pose_rotates_rays_in_world() {
    let pose = Pose::look_at(Vec3::new(1.0, 2.0, -3.0), Vec3::zeros(), Vec3::y());
    let b = Vec3::new(0.1, -0.2, 1.0).normalize();
    let omega = Vec3::new(0.01, -0.02, 0.03);
    let moved = perturb_pose(&pose, &omega, &Vec3::new(0.5, 0.0, 0.0));
    let before = pose.rotation().inverse() * b;
    let after = moved.rotation().inverse() * b;
    assert_relative_eq!(after, Quat::from_scaled_axis(omega) * before, epsilon = 1e-14);
    assert_relative_eq!(moved.center(), pose.center() + Vec3::new(0.5, 0.0, 0.0), epsilon = 1e-14);
}

#[test]
fn exact_problem_is_a_fixed_point() {
    let t = toy(6, 200, 1);
    let mut prob = problem_from(&t, 0.0, &[0], 2);
    let before = prob.clone();
    let s = solve(&mut prob, &SolverOptions::default()).unwrap();
    assert!(s.initial_cost < 1e-18, "{}", s.initial_cost);
    assert!(s.final_cost < 1e-18);
    assert!(s.iterations <= 2, "{s:?}");
    for (a, b) in prob.cameras.iter().zip(&before.cameras) {
        assert!((a.pose.center() - b.pose.center()).norm() < 1e-9);
    }
}

#[test]
fn recovers_small_perturbation_with_anchor() {
    let t = toy(6, 300, 4);
    let mut prob = problem_from(&t, 0.0, &[0], 5);
    let d = baseline(&prob, 0, 3);
    prob.anchor = Some(ScaleAnchor { seed: 0, other: 3, distance: d });
    perturb_all(&mut prob, 1.0, 0.01, 6);
    let s = solve(&mut prob, &SolverOptions { huber_delta: 1.0, ..Default::default() }).unwrap();
    assert!(s.final_cost < 1e-16, "{s:?}");
    for (c, gt) in prob.cameras.iter().zip(&t.poses) {
        assert!(rotation_angle(&(c.pose.rotation() * gt.rotation().inverse())) < 1e-6);
        assert!((c.pose.center() - gt.center()).norm() < 1e-6);
    }
}

#[test]
fn cost_history_strictly_decreases() {
    let t = toy(6, 200, 7);
    let mut prob = problem_from(&t, 0.5, &[0], 8);
    prob.anchor = Some(ScaleAnchor { seed: 0, other: 2, distance: baseline(&prob, 0, 2) });
    perturb_all(&mut prob, 2.0, 0.02, 9);
    let s = solve(&mut prob, &SolverOptions::default()).unwrap();
    assert!(s.cost_history.len() >= 2);
    for w in s.cost_history.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert_eq!(s.cost_history[0], s.initial_cost);
    assert_eq!(*s.cost_history.last().unwrap(), s.final_cost);
}

#[test]
fn nothing_free_returns_unchanged() {
    let t = toy(3, 0, 1);
    let mut prob = problem_from(&t, 0.0, &[0, 1, 2], 1);
    let before = prob.clone();
    let s = solve(&mut prob, &SolverOptions::default()).unwrap();
    assert_eq!(s.termination, Termination::NothingToSolve);
    assert_eq!(s.iterations, 0);
    assert_eq!(prob, before);
}

#[test]
fn rotations_stay_put_when_disabled() {
    let t = toy(5, 150, 12);
    let mut prob = problem_from(&t, 0.3, &[0], 13);
    prob.anchor = Some(ScaleAnchor { seed: 0, other: 4, distance: baseline(&prob, 0, 4) });
    perturb_all(&mut prob, 0.5, 0.01, 14);
    let rots: Vec<Quat> = prob.cameras.iter().map(|c| *c.pose.rotation()).collect();
    let opts = SolverOptions { optimize_rotations: false, ..Default::default() };
    let s = solve(&mut prob, &opts).unwrap();
    assert!(s.final_cost < s.initial_cost);
    for (c, q) in prob.cameras.iter().zip(&rots) {
        assert!(rotation_angle(&(c.pose.rotation() * q.inverse())) < 1e-12);
    }
}

#[test]
fn quadratic_regime_matches_half_sum_of_squares() {
    let t = toy(4, 50, 21);
    let prob = problem_from(&t, 0.2, &[0], 22);
    let opts = SolverOptions { huber_delta: 10.0, ..Default::default() };
    let manual: f64 = prob
        .observations
        .iter()
        .zip(prob.scales())
        .map(|(o, d)| {
            let r = ray_residual(d, &prob.ray(o), &prob.points[o.track], &prob.cameras[o.camera].pose.center());
            0.5 * r.norm_squared()
        })
        .sum();
    assert_relative_eq!(prob.cost(&opts), manual, max_relative = 1e-12);
}

#[test]
fn cost_is_invariant_to_rigid_motion() {
    let t = toy(5, 80, 31);
    let prob = problem_from(&t, 0.5, &[0], 32);
    let opts = SolverOptions::default();
    let g = Pose::new(Quat::from_euler_angles(0.3, -0.2, 1.1), Vec3::new(2.0, -1.0, 0.5));
    let mut moved = prob.clone();
    for c in &mut moved.cameras {
        // world change x' = g(x): new world-to-camera is pose ∘ g⁻¹
        c.pose = c.pose.compose(&g.inverse());
    }
    for x in &mut moved.points {
        *x = g.transform_point(x);
    }
    assert_relative_eq!(prob.cost(&opts), moved.cost(&opts), max_relative = 1e-9);
}

#[test]
fn anchor_prevents_scale_collapse() {
    let t = toy(6, 200, 41);
    let base = problem_from(&t, 1.0, &[0], 42);
    let d = baseline(&base, 0, 5);
    let opts = SolverOptions::default();

    let mut free = base.clone();
    solve(&mut free, &opts).unwrap();
    let mut anchored = base.clone();
    anchored.anchor = Some(ScaleAnchor { seed: 0, other: 5, distance: d });
    solve(&mut anchored, &opts).unwrap();

    assert!(baseline(&free, 0, 5) < 0.5 * d, "free scale {} vs {d}", baseline(&free, 0, 5));
    assert!((baseline(&anchored, 0, 5) / d - 1.0).abs() < 1e-3);
}

#[test]
fn invalid_problems_are_rejected() {
    let t = toy(2, 5, 1);
    let mut prob = problem_from(&t, 0.0, &[], 1);
    assert!(matches!(solve(&mut prob.clone(), &SolverOptions::default()), Err(RefineError::NoGauge)));
    prob.cameras[0].fixed = true;
    prob.anchor = Some(ScaleAnchor { seed: 0, other: 9, distance: 1.0 });
    assert!(matches!(solve(&mut prob.clone(), &SolverOptions::default()), Err(RefineError::BadAnchor(_))));
    prob.anchor = None;
    prob.observations[0].track = 99;
    assert!(matches!(solve(&mut prob, &SolverOptions::default()), Err(RefineError::BadIndex { .. })));
}

fn tracks_from(t: &Toy, noise_px: f64, seed: u64) -> Vec<Track> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    t.points
        .iter()
        .enumerate()
        .map(|(i, x)| Track {
            id: i,
            point: *x,
            observations: t
                .poses
                .iter()
                .enumerate()
                .map(|(c, p)| {
                    let jitter = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * noise_px;
                    Observation {
                        image_id: ImageId(c as u32),
                        pixel: project(&intr(), p, x).unwrap() + jitter,
                        point: *x,
                    }
                })
                .collect(),
        })
        .collect()
}

fn pose_set(t: &Toy) -> PoseSet {
    t.poses.iter().enumerate().map(|(i, p)| (ImageId(i as u32), *p)).collect()
}

fn intrinsics_for(t: &Toy) -> BTreeMap<ImageId, Intrinsics> {
    (0..t.poses.len()).map(|i| (ImageId(i as u32), intr())).collect()
}

#[test]
fn refine_epoch_noop_and_fixedness() {
    let t = toy(5, 100, 51);
    let mut poses = pose_set(&t);
    let mut tracks = tracks_from(&t, 0.5, 52);
    let k = intrinsics_for(&t);
    let opts = SolverOptions::default();
    let none = refine_epoch(&mut poses, &mut tracks, &k, &BTreeSet::new(), None, &opts).unwrap();
    assert!(none.is_none());
    let unknown: BTreeSet<ImageId> = [ImageId(77)].into();
    assert!(refine_epoch(&mut poses, &mut tracks, &k, &unknown, None, &opts).unwrap().is_none());

    let new_id = ImageId(4);
    let before = poses.clone();
    poses.insert(new_id, perturb_pose(&poses[&new_id], &Vec3::new(0.01, 0.0, 0.0), &Vec3::new(0.02, 0.0, 0.0)));
    let s = refine_epoch(&mut poses, &mut tracks, &k, &[new_id].into(), None, &opts).unwrap().unwrap();
    assert!(s.final_cost < s.initial_cost);
    for id in 0..4 {
        assert_eq!(poses[&ImageId(id)], before[&ImageId(id)]);
    }
    assert!((poses[&new_id].center() - before[&new_id].center()).norm() < 0.02);
}

#[test]
fn finalize_fixed_point_and_drift() {
    let t = toy(6, 150, 61);
    let k = intrinsics_for(&t);
    let opts = SolverOptions::default();
    let anchor = Anchor {
        seed: ImageId(0),
        other: ImageId(3),
        distance: (t.poses[3].center() - t.poses[0].center()).norm(),
    };

    let mut poses = pose_set(&t);
    let mut tracks = tracks_from(&t, 0.0, 62);
    finalize(&mut poses, &mut tracks, &k, ImageId(0), Some(anchor), &opts).unwrap();
    for (id, p) in &poses {
        assert!((p.center() - t.poses[id.0 as usize].center()).norm() < 1e-9);
    }

    let mut poses = pose_set(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for (id, p) in poses.iter_mut() {
        if id.0 != 0 {
            let w = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.01;
            let dc = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 0.05;
            *p = perturb_pose(p, &w, &dc);
        }
    }
    let err = |ps: &PoseSet| -> f64 { ps.iter().map(|(id, p)| (p.center() - t.poses[id.0 as usize].center()).norm()).sum() };
    let drift_before = err(&poses);
    let mut tracks = tracks_from(&t, 0.2, 64);
    finalize(&mut poses, &mut tracks, &k, ImageId(0), Some(anchor), &opts).unwrap();
    assert!(err(&poses) < 0.1 * drift_before, "{} vs {drift_before}", err(&poses));
    assert_eq!(poses[&ImageId(0)], t.poses[0]);

    let mut single: PoseSet = [(ImageId(0), t.poses[0])].into();
    assert!(matches!(
        finalize(&mut single, &mut tracks, &k, ImageId(0), None, &opts),
        Err(RefineError::TooFewImages(1))
    ));
}

proptest! {
    #[test]
    fn residual_is_orthogonal_to_ray_in_front(
        n in prop::array::uniform3(-1.0f64..1.0),
        x in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let nu = Vec3::from(n);
        prop_assume!(nu.norm() > 0.1);
        let nu = nu.normalize();
        let x = Vec3::from(x);
        let rj = residual_jacobian(&nu, &x, &Vec3::zeros());
        if nu.dot(&x) > 0.0 {
            prop_assert!(rj.residual.dot(&nu).abs() < 1e-9);
        } else {
            prop_assert_eq!(rj.residual, -x);
        }
        prop_assert!(rj.residual.norm() <= x.norm() + 1e-12);
    }

    #[test]
    fn huber_is_monotone_and_below_quadratic(a in 0.0f64..10.0, b in 0.0f64..10.0, delta in 0.01f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(huber(lo, delta) <= huber(hi, delta));
        prop_assert!(huber(a, delta) <= 0.5 * a * a + 1e-12);
        prop_assert!((huber_weight(a, delta) * a - huber_derivative(a, delta)).abs() < 1e-12);
    }
}
