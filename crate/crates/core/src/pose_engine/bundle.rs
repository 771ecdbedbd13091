//! Levenberg-Marquardt bundle adjustment over camera poses and points with a
//! Schur complement on the point blocks.
//!
//! Residuals are in undistorted pixels. Pose updates are applied on the right:
//! `R <- R * exp([dtheta]x)`, `c <- c + dc`.

use std::ops::{AddAssign, SubAssign};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, Matrix6x3, SMatrix, Vector2, Vector3, Vector6};

use super::PoseError;
use crate::camera::{rotation_from_axis_angle, skew};
use crate::{CameraModel, Pose};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

const MIN_DEPTH: f64 = 1e-9;

/// Ideal (undistorted) pixel of a world point, `None` behind the camera.
#[inline]
pub fn project_ideal(pose: &Pose, point: &Vector3<f64>, camera: &CameraModel) -> Option<Vector2<f64>> {
    let pc = pose.world_to_camera(point);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(Vector2::new(
        camera.fx * pc.x / pc.z + camera.cx,
        camera.fy * pc.y / pc.z + camera.cy,
    ))
}

/// Projection and its derivatives with respect to the pose perturbation
/// `(dtheta, dc)` and the world point.
pub fn observation_jacobian(
    pose: &Pose,
    point: &Vector3<f64>,
    camera: &CameraModel,
) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let rt = pose.rotation().transpose();
    let pc = rt * (point - pose.center());
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let iz = 1.0 / pc.z;
    let proj = Vector2::new(camera.fx * pc.x * iz + camera.cx, camera.fy * pc.y * iz + camera.cy);
    let dpi = Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * pc.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * pc.y * iz * iz,
    );
    let d_theta = dpi * skew(&pc);
    let d_center = -dpi * rt;
    let d_point = dpi * rt;
    let mut jp = Matrix2x6::zeros();
    jp.fixed_view_mut::<2, 3>(0, 0).copy_from(&d_theta);
    jp.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_center);
    Some((proj, jp, d_point))
}

/// Applies a pose perturbation on the manifold.
pub fn retract_pose(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let dtheta = Vector3::new(delta[0], delta[1], delta[2]);
    let dc = Vector3::new(delta[3], delta[4], delta[5]);
    Pose::from_rotation_nearest(pose.rotation() * rotation_from_axis_angle(&dtheta), pose.center() + dc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub point: usize,
    /// Undistorted pixel.
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BundleProblem {
    pub poses: Vec<Pose>,
    pub pose_fixed: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub point_fixed: Vec<bool>,
    pub observations: Vec<Observation>,
}

impl BundleProblem {
    pub fn add_pose(&mut self, pose: Pose, fixed: bool) -> usize {
        self.poses.push(pose);
        self.pose_fixed.push(fixed);
        self.poses.len() - 1
    }

    pub fn add_point(&mut self, point: Vector3<f64>, fixed: bool) -> usize {
        self.points.push(point);
        self.point_fixed.push(fixed);
        self.points.len() - 1
    }

    pub fn observe(&mut self, camera: usize, point: usize, pixel: Vector2<f64>) {
        self.observations.push(Observation { camera, point, pixel });
    }

    /// Sum of squared residuals, or infinity if a point falls behind a camera.
    pub fn cost(&self, camera: &CameraModel) -> f64 {
        cost_of(&self.poses, &self.points, &self.observations, camera)
    }

    /// Per-observation reprojection error in pixels (infinite behind camera).
    pub fn reprojection_errors(&self, camera: &CameraModel) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| {
                project_ideal(&self.poses[o.camera], &self.points[o.point], camera)
                    .map_or(f64::INFINITY, |p| (p - o.pixel).norm())
            })
            .collect()
    }

    pub fn rms(&self, camera: &CameraModel) -> f64 {
        if self.observations.is_empty() {
            return 0.0;
        }
        (self.cost(camera) / self.observations.len() as f64).sqrt()
    }

    /// Removes observations whose error exceeds `threshold`; returns the
    /// removed observations.
    pub fn remove_outliers(&mut self, camera: &CameraModel, threshold: f64) -> Vec<Observation> {
        let errors = self.reprojection_errors(camera);
        let mut removed = Vec::new();
        let mut kept = Vec::with_capacity(self.observations.len());
        for (o, e) in self.observations.iter().zip(errors) {
            if e > threshold {
                removed.push(*o);
            } else {
                kept.push(*o);
            }
        }
        self.observations = kept;
        removed
    }
}

fn cost_of(poses: &[Pose], points: &[Vector3<f64>], obs: &[Observation], camera: &CameraModel) -> f64 {
    let mut c = 0.0;
    for o in obs {
        match project_ideal(&poses[o.camera], &points[o.point], camera) {
            Some(p) => c += (p - o.pixel).norm_squared(),
            None => return f64::INFINITY,
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub function_tolerance: f64,
    /// Stop when the step is smaller than this fraction of the parameters.
    pub parameter_tolerance: f64,
    pub max_consecutive_rejections: usize,
    /// Observations with larger error are dropped after convergence, pixels.
    pub outlier_threshold: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_lambda: 1e-3,
            function_tolerance: 1e-8,
            parameter_tolerance: 1e-10,
            max_consecutive_rejections: 10,
            outlier_threshold: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    AlreadyOptimal,
    FunctionTolerance,
    ParameterTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleReport {
    /// Accepted steps.
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub initial_rms: f64,
    pub final_rms: f64,
    pub termination: Termination,
    /// Cost after each accepted step (starting with the initial cost).
    pub cost_history: Vec<f64>,
}

/// Below this RMS (pixels) the problem is treated as already solved.
const NEGLIGIBLE_RMS: f64 = 1e-10;

/// Minimizes the squared reprojection error over the free poses and points.
/// Fixed poses and fixed points are never written.
pub fn bundle_adjust(
    problem: &mut BundleProblem,
    camera: &CameraModel,
    config: &BundleConfig,
) -> Result<BundleReport, PoseError> {
    let nobs = problem.observations.len().max(1) as f64;
    let mut cost = problem.cost(camera);
    if !cost.is_finite() {
        return Err(PoseError::InvalidInput("point behind camera at start of adjustment".into()));
    }
    let initial_cost = cost;
    let mut report = BundleReport {
        iterations: 0,
        evaluations: 1,
        initial_cost,
        final_cost: cost,
        initial_rms: (cost / nobs).sqrt(),
        final_rms: (cost / nobs).sqrt(),
        termination: Termination::AlreadyOptimal,
        cost_history: vec![cost],
    };
    if (cost / nobs).sqrt() < NEGLIGIBLE_RMS {
        return Ok(report);
    }

    let mut cam_var = vec![usize::MAX; problem.poses.len()];
    let mut ncam = 0;
    for (i, fixed) in problem.pose_fixed.iter().enumerate() {
        if !fixed {
            cam_var[i] = ncam;
            ncam += 1;
        }
    }
    let mut pt_var = vec![usize::MAX; problem.points.len()];
    let mut npt = 0;
    for (i, fixed) in problem.point_fixed.iter().enumerate() {
        if !fixed {
            pt_var[i] = npt;
            npt += 1;
        }
    }
    if ncam == 0 && npt == 0 {
        return Ok(report);
    }
    // Observations grouped by free point.
    let mut obs_of_point: Vec<Vec<usize>> = vec![Vec::new(); npt];
    for (k, o) in problem.observations.iter().enumerate() {
        if pt_var[o.point] != usize::MAX {
            obs_of_point[pt_var[o.point]].push(k);
        }
    }

    let mut lambda = config.initial_lambda;
    let mut rejections = 0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        // Linearize.
        let mut u = vec![Matrix6::<f64>::zeros(); ncam];
        let mut gc = vec![Vector6::<f64>::zeros(); ncam];
        let mut v = vec![Matrix3::<f64>::zeros(); npt];
        let mut gp = vec![Vector3::<f64>::zeros(); npt];
        let mut w = vec![Matrix6x3::<f64>::zeros(); problem.observations.len()];
        for (k, o) in problem.observations.iter().enumerate() {
            let (proj, jc, jx) = observation_jacobian(&problem.poses[o.camera], &problem.points[o.point], camera)
                .ok_or_else(|| PoseError::InvalidInput("point behind camera".into()))?;
            let r = proj - o.pixel;
            let ci = cam_var[o.camera];
            let pi = pt_var[o.point];
            if ci != usize::MAX {
                u[ci] += jc.transpose() * jc;
                gc[ci] += jc.transpose() * r;
            }
            if pi != usize::MAX {
                v[pi] += jx.transpose() * jx;
                gp[pi] += jx.transpose() * r;
            }
            if ci != usize::MAX && pi != usize::MAX {
                w[k] = jc.transpose() * jx;
            }
        }

        // Inner loop: retry with increasing damping until a step is accepted.
        loop {
            let step = solve_damped(&u, &gc, &v, &gp, &w, &obs_of_point, &problem.observations, &cam_var, lambda);
            let Some((dc, dp)) = step else {
                rejections += 1;
                lambda *= 10.0;
                if rejections >= config.max_consecutive_rejections {
                    return Err(PoseError::DivergedAdjustment { rejections });
                }
                continue;
            };
            let step_norm = (dc.iter().map(|d| d.norm_squared()).sum::<f64>()
                + dp.iter().map(|d| d.norm_squared()).sum::<f64>())
            .sqrt();
            let param_norm = (problem
                .poses
                .iter()
                .zip(&problem.pose_fixed)
                .filter(|(_, f)| !**f)
                .map(|(p, _)| p.center().norm_squared())
                .sum::<f64>()
                + problem
                    .points
                    .iter()
                    .zip(&problem.point_fixed)
                    .filter(|(_, f)| !**f)
                    .map(|(p, _)| p.norm_squared())
                    .sum::<f64>())
            .sqrt();
            if step_norm <= config.parameter_tolerance * (param_norm + config.parameter_tolerance) {
                termination = Termination::ParameterTolerance;
                report.final_cost = cost;
                report.final_rms = (cost / nobs).sqrt();
                report.termination = termination;
                report.iterations = iterations;
                return Ok(report);
            }
            let mut poses = problem.poses.clone();
            for (i, p) in poses.iter_mut().enumerate() {
                if cam_var[i] != usize::MAX {
                    *p = retract_pose(p, &dc[cam_var[i]]);
                }
            }
            let mut points = problem.points.clone();
            for (i, p) in points.iter_mut().enumerate() {
                if pt_var[i] != usize::MAX {
                    *p += dp[pt_var[i]];
                }
            }
            let new_cost = cost_of(&poses, &points, &problem.observations, camera);
            report.evaluations += 1;
            if new_cost < cost {
                problem.poses = poses;
                problem.points = points;
                let decrease = (cost - new_cost) / cost;
                cost = new_cost;
                report.cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-15);
                rejections = 0;
                iterations += 1;
                if decrease < config.function_tolerance {
                    termination = Termination::FunctionTolerance;
                }
                if (cost / nobs).sqrt() < NEGLIGIBLE_RMS {
                    termination = Termination::FunctionTolerance;
                }
                break;
            }
            rejections += 1;
            lambda *= 10.0;
            if rejections >= config.max_consecutive_rejections {
                return Err(PoseError::DivergedAdjustment { rejections });
            }
        }
        if termination == Termination::FunctionTolerance {
            break;
        }
    }
    report.iterations = iterations;
    report.final_cost = cost;
    report.final_rms = (cost / nobs).sqrt();
    report.termination = termination;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn solve_damped(
    u: &[Matrix6<f64>],
    gc: &[Vector6<f64>],
    v: &[Matrix3<f64>],
    gp: &[Vector3<f64>],
    w: &[Matrix6x3<f64>],
    obs_of_point: &[Vec<usize>],
    observations: &[Observation],
    cam_var: &[usize],
    lambda: f64,
) -> Option<(Vec<Vector6<f64>>, Vec<Vector3<f64>>)> {
    let ncam = u.len();
    let damp3 = |m: &Matrix3<f64>| {
        let mut d = *m;
        for i in 0..3 {
            d[(i, i)] += lambda * m[(i, i)].max(1e-12);
        }
        d
    };
    let v_inv: Vec<Matrix3<f64>> = v.iter().map(|m| damp3(m).try_inverse()).collect::<Option<_>>()?;

    let n = 6 * ncam;
    let mut s = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (c, (uc, g)) in u.iter().zip(gc).enumerate() {
        let mut d = *uc;
        for i in 0..6 {
            d[(i, i)] += lambda * uc[(i, i)].max(1e-12);
        }
        s.view_mut((6 * c, 6 * c), (6, 6)).add_assign(&d);
        rhs.rows_mut(6 * c, 6).add_assign(&(-g));
    }
    for (p, obs) in obs_of_point.iter().enumerate() {
        let vi = v_inv[p];
        for &a in obs {
            let ca = cam_var[observations[a].camera];
            if ca == usize::MAX {
                continue;
            }
            let wa_vi = w[a] * vi;
            rhs.rows_mut(6 * ca, 6).add_assign(&(wa_vi * gp[p]));
            for &b in obs {
                let cb = cam_var[observations[b].camera];
                if cb == usize::MAX {
                    continue;
                }
                let blk = wa_vi * w[b].transpose();
                s.view_mut((6 * ca, 6 * cb), (6, 6)).sub_assign(&blk);
            }
        }
    }
    let dc_flat = if n > 0 {
        match s.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => s.lu().solve(&rhs)?,
        }
    } else {
        DVector::zeros(0)
    };
    if !dc_flat.iter().all(|x| x.is_finite()) {
        return None;
    }
    let dc: Vec<Vector6<f64>> = (0..ncam).map(|c| Vector6::from_iterator(dc_flat.rows(6 * c, 6).iter().copied())).collect();
    let mut dp = Vec::with_capacity(v.len());
    for (p, obs) in obs_of_point.iter().enumerate() {
        let mut r = -gp[p];
        for &a in obs {
            let ca = cam_var[observations[a].camera];
            if ca != usize::MAX {
                r -= w[a].transpose() * dc[ca];
            }
        }
        let d = v_inv[p] * r;
        if !d.iter().all(|x| x.is_finite()) {
            return None;
        }
        dp.push(d);
    }
    Some((dc, dp))
}
