//! Minimal absolute pose from three 2D-3D correspondences.
//!
//! With depths `s1, s2, s3` along the unit bearings and `u = s2/s1`,
//! `v = s3/s1`, the law of cosines gives two quadratics in `u` sharing the
//! leading coefficient. Eliminating `u` leaves a quartic in `v`.

use nalgebra::Matrix3;

use super::Correspondence;
use crate::geometry::{project, Intrinsics, Pose, Quat, Vec3};

/// Largest reprojection error, in pixels, of an accepted candidate.
const MAX_REPROJ: f64 = 1e-6;

type Poly = [f64; 5];

fn mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = [0.0; 5];
    for i in 0..5 {
        for j in 0..5 - i {
            out[i + j] += a[i] * b[j];
        }
    }
    out
}

fn add(a: &Poly, b: &Poly, sb: f64) -> Poly {
    std::array::from_fn(|i| a[i] + sb * b[i])
}

fn eval(p: &Poly, x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn eval_deriv(p: &Poly, x: f64) -> f64 {
    (1..5).rev().fold(0.0, |acc, i| acc * x + i as f64 * p[i])
}

/// Real roots of a polynomial of degree ≤ 4 (ascending coefficients).
fn real_roots(p: &Poly) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = 4;
    while deg > 0 && p[deg].abs() <= 1e-12 * scale {
        deg -= 1;
    }
    let mut roots = Vec::new();
    match deg {
        0 => {}
        1 => roots.push(-p[0] / p[1]),
        _ => {
            let n = deg;
            let mut c = nalgebra::DMatrix::<f64>::zeros(n, n);
            for i in 1..n {
                c[(i, i - 1)] = 1.0;
            }
            for i in 0..n {
                c[(i, n - 1)] = -p[i] / p[n];
            }
            for z in c.complex_eigenvalues().iter() {
                if z.im.abs() <= 1e-6 * (1.0 + z.re.abs()) {
                    roots.push(z.re);
                }
            }
        }
    }
    // Newton polish on the full polynomial
    for r in &mut roots {
        for _ in 0..8 {
            let d = eval_deriv(p, *r);
            if d == 0.0 {
                break;
            }
            let step = eval(p, *r) / d;
            *r -= step;
            if step.abs() <= 1e-15 * (1.0 + r.abs()) {
                break;
            }
        }
    }
    roots
}

/// Rigid `(R, t)` with `y ≈ R x + t`, least squares over three pairs.
pub(crate) fn kabsch(x: &[Vec3], y: &[Vec3]) -> Option<Pose> {
    let n = x.len() as f64;
    let cx = x.iter().sum::<Vec3>() / n;
    let cy = y.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        h += (b - cy) * (a - cx).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let q = Quat::from_matrix(&r);
    let t = cy - q * cx;
    Some(Pose::new(q, t))
}

/// Newton refinement of the depths against the three distance constraints.
fn polish_depths(s: &mut Vec3, f: &[Vec3; 3], d2: &[f64; 3]) {
    // constraint k couples depths (i, j)
    let pairs = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..6 {
        let mut j = Matrix3::zeros();
        let mut r = Vec3::zeros();
        for (k, &(a, b)) in pairs.iter().enumerate() {
            let diff = f[a] * s[a] - f[b] * s[b];
            r[k] = diff.norm_squared() - d2[k];
            j[(k, a)] = 2.0 * diff.dot(&f[a]);
            j[(k, b)] = -2.0 * diff.dot(&f[b]);
        }
        match j.lu().solve(&r) {
            Some(step) if step.iter().all(|v| v.is_finite()) => {
                *s -= step;
                if step.amax() <= 1e-15 * s.amax() {
                    break;
                }
            }
            _ => break,
        }
    }
}

/// Up to four cheirality-valid poses mapping the three points onto their
/// pixels; empty for degenerate triples.
pub fn p3p_solve(corrs: &[Correspondence; 3], k: &Intrinsics) -> Vec<Pose> {
    let x: [Vec3; 3] = std::array::from_fn(|i| corrs[i].point);
    let span = (x[1] - x[0]).norm().max((x[2] - x[0]).norm());
    if span == 0.0 || (x[1] - x[0]).cross(&(x[2] - x[0])).norm() <= 1e-10 * span * span {
        return Vec::new();
    }
    let f: [Vec3; 3] = std::array::from_fn(|i| k.unproject(&corrs[i].pixel).normalize());
    if f[0].cross(&f[1]).norm() < 1e-12 || f[0].cross(&f[2]).norm() < 1e-12 || f[1].cross(&f[2]).norm() < 1e-12 {
        return Vec::new();
    }
    let a2 = (x[1] - x[2]).norm_squared();
    let b2 = (x[0] - x[2]).norm_squared();
    let c2 = (x[0] - x[1]).norm_squared();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    // polynomials in v, ascending coefficients
    let w: Poly = [1.0, -2.0 * cos_b, 1.0, 0.0, 0.0]; // 1 + v² - 2v cosβ
    let p1: Poly = [-2.0 * b2 * cos_g, 0.0, 0.0, 0.0, 0.0];
    let p0: Poly = add(&[b2, 0.0, 0.0, 0.0, 0.0], &w, -c2);
    let q1: Poly = [0.0, -2.0 * b2 * cos_a, 0.0, 0.0, 0.0];
    let q0: Poly = add(&[0.0, 0.0, b2, 0.0, 0.0], &w, -a2);
    let dq = add(&q0, &p0, -1.0);
    let dp = add(&p1, &q1, -1.0);
    let cross = add(&mul(&p1, &q0), &mul(&p0, &q1), -1.0);
    let quartic = add(&mul(&dq, &dq).map(|c| c * b2), &mul(&dp, &cross), 1.0);

    let d2 = [a2, b2, c2];
    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&quartic) {
        if !(v > 0.0) {
            continue;
        }
        let wv = eval(&w, v);
        if !(wv > 0.0) {
            continue;
        }
        let s1 = (b2 / wv).sqrt();
        let den = eval(&dp, v);
        let us: Vec<f64> = if den.abs() > 1e-12 * b2 {
            vec![eval(&dq, v) / den]
        } else {
            // both quadratics coincide; take the roots of one
            let (c0, c1) = (eval(&p0, v), p1[0]);
            let disc = c1 * c1 - 4.0 * b2 * c0;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            vec![(-c1 + sq) / (2.0 * b2), (-c1 - sq) / (2.0 * b2)]
        };
        for u in us {
            if !(u > 0.0) {
                continue;
            }
            let mut s = Vec3::new(s1, u * s1, v * s1);
            polish_depths(&mut s, &f, &d2);
            if !s.iter().all(|d| *d > 0.0 && d.is_finite()) {
                continue;
            }
            let y: Vec<Vec3> = (0..3).map(|i| f[i] * s[i]).collect();
            let Some(pose) = kabsch(&x, &y) else { continue };
            let ok = (0..3).all(|i| match project(k, &pose, &x[i]) {
                Ok(px) => (px - corrs[i].pixel).norm() < MAX_REPROJ,
                Err(_) => false,
            });
            let duplicate = poses.iter().any(|p| {
                (p.translation() - pose.translation()).norm() < 1e-9 * (1.0 + pose.translation().norm())
                    && p.rotation().angle_to(pose.rotation()) < 1e-9
            });
            if ok && !duplicate {
                poses.push(pose);
            }
        }
    }
    poses
}
