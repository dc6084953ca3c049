//! Levenberg-Marquardt with Huber IRLS weights; track points are
//! eliminated through the Schur complement, leaving a dense camera system.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix};
use serde::Serialize;

use super::{huber_weight, perturb_pose, residual_jacobian, RefineError, RefineProblem, SolverOptions};
use crate::geometry::Vec3;

type Mat36 = SMatrix<f64, 3, 6>;
type Mat63 = SMatrix<f64, 6, 3>;
type Vec6 = SMatrix<f64, 6, 1>;

const REL_DECREASE_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-10;
const MAX_LAMBDA: f64 = 1e32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    NothingToSolve,
    SmallDecrease,
    SmallStep,
    MaxIterations,
    DampingExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSummary {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
}

struct Linearization {
    /// Dense camera block, `6 · free` square.
    a: DMatrix<f64>,
    g_cam: DVector<f64>,
    /// Per observation: camera block (free cameras only) and point block.
    j_cam: Vec<Option<Mat36>>,
    j_pt: Vec<Matrix3<f64>>,
    weights: Vec<f64>,
    v: Vec<Matrix3<f64>>,
    g_pt: Vec<Vec3>,
}

fn linearize(p: &RefineProblem, opts: &SolverOptions, cam_slot: &[Option<usize>]) -> Result<Linearization, RefineError> {
    let nfree = cam_slot.iter().filter(|s| s.is_some()).count();
    let mut a = DMatrix::zeros(6 * nfree, 6 * nfree);
    let mut g_cam = DVector::zeros(6 * nfree);
    let mut v = vec![Matrix3::zeros(); p.points.len()];
    let mut g_pt = vec![Vec3::zeros(); p.points.len()];
    let mut j_cam = Vec::with_capacity(p.observations.len());
    let mut j_pt = Vec::with_capacity(p.observations.len());
    let mut weights = Vec::with_capacity(p.observations.len());
    let centers: Vec<Vec3> = p.cameras.iter().map(|c| c.pose.center()).collect();
    for (i, o) in p.observations.iter().enumerate() {
        let nu = p.ray(o);
        let rj = residual_jacobian(&nu, &p.points[o.track], &centers[o.camera]);
        let finite = rj.residual.iter().all(|x| x.is_finite())
            && rj.d_omega.iter().all(|x| x.is_finite())
            && rj.d_center.iter().all(|x| x.is_finite());
        if !finite {
            return Err(RefineError::NonFinite(i));
        }
        let w = huber_weight(rj.residual.norm(), opts.huber_delta);
        let wr = rj.residual * w;
        v[o.track] += rj.d_point.transpose() * rj.d_point * w;
        g_pt[o.track] += rj.d_point.transpose() * wr;
        let jc = cam_slot[o.camera].map(|s| {
            let mut j = Mat36::zeros();
            if opts.optimize_rotations {
                j.fixed_view_mut::<3, 3>(0, 0).copy_from(&rj.d_omega);
            }
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&rj.d_center);
            let jt = j.transpose();
            let mut blk = a.fixed_view_mut::<6, 6>(6 * s, 6 * s);
            blk += jt * j * w;
            let mut gb = g_cam.fixed_rows_mut::<6>(6 * s);
            gb += jt * wr;
            j
        });
        j_cam.push(jc);
        j_pt.push(rj.d_point);
        weights.push(w);
    }
    if let Some(anc) = p.anchor {
        let diff = centers[anc.other] - centers[anc.seed];
        let len = diff.norm();
        if len > 0.0 {
            let n = diff / len;
            let e = len - anc.distance;
            let w = opts.anchor_weight;
            for (cam, sign) in [(anc.other, 1.0), (anc.seed, -1.0)] {
                if let Some(s) = cam_slot[cam] {
                    let mut j = Vec6::zeros();
                    j.fixed_rows_mut::<3>(3).copy_from(&(n * sign));
                    let mut gb = g_cam.fixed_rows_mut::<6>(6 * s);
                    gb += j * (w * e);
                    for (cam2, sign2) in [(anc.other, 1.0), (anc.seed, -1.0)] {
                        if let Some(s2) = cam_slot[cam2] {
                            let mut j2 = Vec6::zeros();
                            j2.fixed_rows_mut::<3>(3).copy_from(&(n * sign2));
                            let mut blk = a.fixed_view_mut::<6, 6>(6 * s, 6 * s2);
                            blk += j * j2.transpose() * w;
                        }
                    }
                }
            }
        }
    }
    Ok(Linearization {
        a,
        g_cam,
        j_cam,
        j_pt,
        weights,
        v,
        g_pt,
    })
}

/// Solves the damped normal equations; `None` if the system is not
/// positive definite.
fn damped_step(
    p: &RefineProblem,
    lin: &Linearization,
    cam_slot: &[Option<usize>],
    by_track: &[Vec<usize>],
    lambda: f64,
) -> Option<(DVector<f64>, Vec<Vec3>)> {
    let n = lin.a.nrows();
    let mut s = lin.a.clone();
    for i in 0..n {
        s[(i, i)] += lambda;
    }
    let mut rhs = -lin.g_cam.clone();
    let mut v_inv = Vec::with_capacity(p.points.len());
    for (t, obs) in by_track.iter().enumerate() {
        let vi = (lin.v[t] + Matrix3::identity() * lambda).try_inverse()?;
        // W_o = B_o V⁻¹ with B_o = J_camᵀ w J_pt
        let ws: Vec<(usize, Mat63)> = obs
            .iter()
            .filter_map(|&o| {
                let slot = cam_slot[p.observations[o].camera]?;
                let jc = lin.j_cam[o]?;
                Some((slot, jc.transpose() * weight_of(lin, o) * lin.j_pt[o] * vi))
            })
            .collect();
        for (sa, wa) in &ws {
            let mut rb = rhs.fixed_rows_mut::<6>(6 * sa);
            rb += wa * lin.g_pt[t];
        }
        for &o2 in obs {
            let Some(sb) = cam_slot[p.observations[o2].camera] else { continue };
            let jc2 = lin.j_cam[o2].unwrap();
            let bt = lin.j_pt[o2].transpose() * weight_of(lin, o2) * jc2;
            for (sa, wa) in &ws {
                let mut blk = s.fixed_view_mut::<6, 6>(6 * sa, 6 * sb);
                blk -= wa * bt;
            }
        }
        v_inv.push(vi);
    }
    let dc = if n > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
    let mut dx = Vec::with_capacity(p.points.len());
    for (t, obs) in by_track.iter().enumerate() {
        let mut r = -lin.g_pt[t];
        for &o in obs {
            if let (Some(slot), Some(jc)) = (cam_slot[p.observations[o].camera], lin.j_cam[o]) {
                let bt = lin.j_pt[o].transpose() * weight_of(lin, o) * jc;
                r -= bt * dc.fixed_rows::<6>(6 * slot);
            }
        }
        dx.push(v_inv[t] * r);
    }
    Some((dc, dx))
}

fn weight_of(lin: &Linearization, o: usize) -> f64 {
    lin.weights[o]
}

fn apply(p: &RefineProblem, cam_slot: &[Option<usize>], dc: &DVector<f64>, dx: &[Vec3]) -> RefineProblem {
    let mut q = p.clone();
    for (cam, slot) in q.cameras.iter_mut().zip(cam_slot) {
        if let Some(s) = slot {
            let d = dc.fixed_rows::<6>(6 * s);
            cam.pose = perturb_pose(&cam.pose, &Vec3::new(d[0], d[1], d[2]), &Vec3::new(d[3], d[4], d[5]));
        }
    }
    for (x, d) in q.points.iter_mut().zip(dx) {
        *x += d;
    }
    q
}

/// Minimizes the problem's cost in place.
pub fn solve(problem: &mut RefineProblem, opts: &SolverOptions) -> Result<SolveSummary, RefineError> {
    problem.validate()?;
    let mut cam_slot = Vec::with_capacity(problem.cameras.len());
    let mut nfree = 0;
    for c in &problem.cameras {
        if c.fixed {
            cam_slot.push(None);
        } else {
            cam_slot.push(Some(nfree));
            nfree += 1;
        }
    }
    let mut by_track = vec![Vec::new(); problem.points.len()];
    for (i, o) in problem.observations.iter().enumerate() {
        by_track[o.track].push(i);
    }
    let initial = problem.cost(opts);
    if !initial.is_finite() {
        return Err(RefineError::NonFinite(0));
    }
    let mut summary = SolveSummary {
        initial_cost: initial,
        final_cost: initial,
        iterations: 0,
        cost_history: vec![initial],
        termination: Termination::NothingToSolve,
    };
    if nfree == 0 && problem.points.is_empty() {
        return Ok(summary);
    }
    let mut cost = initial;
    let mut lin = linearize(problem, opts, &cam_slot)?;
    let mut lambda = {
        let cam_diag = (0..lin.a.nrows()).map(|i| lin.a[(i, i)]).fold(0.0, f64::max);
        let pt_diag = lin.v.iter().flat_map(|v| (0..3).map(move |i| v[(i, i)])).fold(0.0, f64::max);
        1e-4 * cam_diag.max(pt_diag).max(f64::MIN_POSITIVE)
    };
    summary.termination = Termination::MaxIterations;
    while summary.iterations < opts.max_iters {
        summary.iterations += 1;
        let Some((dc, dx)) = damped_step(problem, &lin, &cam_slot, &by_track, lambda) else {
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                summary.termination = Termination::DampingExhausted;
                break;
            }
            continue;
        };
        let step_norm = dc.amax().max(dx.iter().map(|d| d.amax()).fold(0.0, f64::max));
        if step_norm < STEP_TOL {
            summary.termination = Termination::SmallStep;
            break;
        }
        let candidate = apply(problem, &cam_slot, &dc, &dx);
        let new_cost = candidate.cost(opts);
        if new_cost.is_finite() && new_cost < cost {
            let decrease = cost - new_cost;
            *problem = candidate;
            cost = new_cost;
            summary.cost_history.push(cost);
            lambda *= 0.5;
            if decrease <= REL_DECREASE_TOL * (cost + decrease) {
                summary.termination = Termination::SmallDecrease;
                break;
            }
            lin = linearize(problem, opts, &cam_slot)?;
        } else {
            lambda *= 10.0;
            if lambda > MAX_LAMBDA {
                summary.termination = Termination::DampingExhausted;
                break;
            }
        }
    }
    summary.final_cost = cost;
    Ok(summary)
}
