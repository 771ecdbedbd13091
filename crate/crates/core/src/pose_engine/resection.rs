//! Perspective resection: three-point pose (Grunert's quartic), robust
//! sampling and Levenberg-Marquardt refinement.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bundle::{observation_jacobian, project_ideal, retract_pose};
use crate::{CameraModel, PixelCoord, Pose};

/// Real roots of `c[0] x^4 + c[1] x^3 + c[2] x^2 + c[3] x + c[4]`, polished by
/// Newton's method.
pub fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    if c[0].abs() < 1e-14 * c.iter().map(|v| v.abs()).fold(0.0, f64::max) {
        return Vec::new();
    }
    let a = [c[1] / c[0], c[2] / c[0], c[3] / c[0], c[4] / c[0]];
    let companion = Matrix4::new(
        -a[0], -a[1], -a[2], -a[3], 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
    );
    let eval = |x: f64| (((c[0] * x + c[1]) * x + c[2]) * x + c[3]) * x + c[4];
    let deriv = |x: f64| ((4.0 * c[0] * x + 3.0 * c[1]) * x + 2.0 * c[2]) * x + c[3];
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..5 {
                let d = deriv(x);
                if d == 0.0 {
                    break;
                }
                let step = eval(x) / d;
                x -= step;
                if step.abs() < 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

/// Rigid transform `(R, t)` minimizing `sum |R a_i + t - b_i|^2`.
pub fn rigid_alignment(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<Vector3<f64>>() / n;
    let mb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (q - mb) * (p - ma).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Some((r, mb - r * ma))
}

/// Camera poses consistent with three bearing/point pairs (up to four).
/// Bearings are unit vectors in the camera frame.
pub fn p3p(bearings: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let [j1, j2, j3] = bearings;
    let [p1, p2, p3] = points;
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let ca = j2.dot(j3);
    let cb = j1.dot(j3);
    let cg = j1.dot(j2);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let coeffs = [
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * ca * ca,
        4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb),
        2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * (b2 - c2) / b2 * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * (b2 - a2) / b2 * cg * cg),
        4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg),
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg,
    ];
    let mut out = Vec::new();
    for v in quartic_roots(coeffs) {
        if v <= 0.0 {
            continue;
        }
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        if u <= 0.0 {
            continue;
        }
        let s1_sq = c2 / (1.0 + u * u - 2.0 * u * cg);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let cam = [j1 * s1, j2 * (u * s1), j3 * (v * s1)];
        // Camera-frame points = R_cw * world + t.
        let Some((r, t)) = rigid_alignment(points, &cam) else { continue };
        let rotation = r.transpose();
        let center = -rotation * t;
        if rotation.iter().all(|x| x.is_finite()) && center.iter().all(|x| x.is_finite()) {
            out.push(Pose::from_rotation_nearest(rotation, center));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResectionConfig {
    /// Inlier reprojection threshold, pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for ResectionConfig {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            confidence: 0.999,
            max_iterations: 500,
            min_inliers: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resection {
    pub pose: Pose,
    pub inliers: Vec<usize>,
    pub rms: f64,
}

fn inliers_of(pose: &Pose, points: &[Vector3<f64>], pixels: &[Vector2<f64>], camera: &CameraModel, thr: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut err = 0.0;
    for (k, (x, px)) in points.iter().zip(pixels).enumerate() {
        if let Some(p) = project_ideal(pose, x, camera) {
            let e = (p - px).norm_squared();
            if e < thr * thr {
                idx.push(k);
                err += e;
            }
        }
    }
    (idx, err)
}

/// Levenberg-Marquardt over the six pose parameters.
pub fn refine_pose(pose: &Pose, points: &[Vector3<f64>], pixels: &[Vector2<f64>], camera: &CameraModel, iterations: usize) -> Pose {
    let cost = |p: &Pose| -> f64 {
        points
            .iter()
            .zip(pixels)
            .map(|(x, px)| project_ideal(p, x, camera).map_or(f64::INFINITY, |q| (q - px).norm_squared()))
            .sum()
    };
    let mut current = *pose;
    let mut c = cost(&current);
    let mut lambda = 1e-3;
    for _ in 0..iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, px) in points.iter().zip(pixels) {
            if let Some((p, j, _)) = observation_jacobian(&current, x, camera) {
                h += j.transpose() * j;
                g += j.transpose() * (p - px);
            }
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut hd = h;
            for i in 0..6 {
                hd[(i, i)] += lambda * h[(i, i)].max(1e-12);
            }
            let Some(step) = hd.cholesky().map(|ch| ch.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = retract_pose(&current, &step);
            let nc = cost(&candidate);
            if nc < c {
                let rel = (c - nc) / c.max(1e-300);
                current = candidate;
                c = nc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    current
}

/// Robust pose from 3D-2D correspondences (undistorted pixels).
pub fn resect(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    camera: &CameraModel,
    config: &ResectionConfig,
) -> Option<Resection> {
    let n = points.len();
    if n < 4 || n != pixels.len() {
        return None;
    }
    let bearings: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|p| {
            let m = camera.pixel_to_normalized(PixelCoord::new(p.x, p.y));
            Vector3::new(m.x, m.y, 1.0).normalize()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, f64, Pose)> = None;
    let mut needed = config.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(&mut rng, n, 3);
        let b = [bearings[idx.index(0)], bearings[idx.index(1)], bearings[idx.index(2)]];
        let x = [points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]];
        for pose in p3p(&b, &x) {
            let (inl, err) = inliers_of(&pose, points, pixels, camera, config.threshold);
            let count = inl.len();
            if best.as_ref().is_none_or(|(c, e, _)| count > *c || (count == *c && err < *e)) {
                best = Some((count, err, pose));
                let w = (count as f64 / n as f64).powi(3);
                needed = if w >= 1.0 - 1e-12 {
                    1
                } else if w <= 0.0 {
                    config.max_iterations
                } else {
                    (((1.0 - config.confidence).ln() / (1.0 - w).ln()).ceil() as usize).clamp(1, config.max_iterations)
                };
            }
        }
    }
    let (_, _, mut pose) = best?;
    let mut inliers = Vec::new();
    for _ in 0..3 {
        let (inl, _) = inliers_of(&pose, points, pixels, camera, config.threshold);
        if inl.len() < 3 {
            return None;
        }
        let p: Vec<_> = inl.iter().map(|&k| points[k]).collect();
        let q: Vec<_> = inl.iter().map(|&k| pixels[k]).collect();
        pose = refine_pose(&pose, &p, &q, camera, 20);
        let same = inl == inliers;
        inliers = inl;
        if same {
            break;
        }
    }
    let (inliers, err) = inliers_of(&pose, points, pixels, camera, config.threshold);
    if inliers.len() < config.min_inliers.max(3) {
        return None;
    }
    Some(Resection {
        rms: (err / inliers.len() as f64).sqrt(),
        pose,
        inliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{nadir_rotation, rotation_from_axis_angle};
    use rand::Rng;

    fn cam() -> CameraModel {
        CameraModel::pinhole(800.0, 968, 728).unwrap()
    }

    #[test]
    fn quartic_with_known_roots() {
        // (x-1)(x+2)(x-3)(x-0.5)
        let roots = quartic_roots([1.0, -2.5, -4.0, 8.5, -3.0]);
        let mut r = roots.clone();
        r.sort_by(f64::total_cmp);
        let expected = [-2.0, 0.5, 1.0, 3.0];
        assert_eq!(r.len(), 4);
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn p3p_contains_true_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let r = rotation_from_axis_angle(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let truth = Pose::from_rotation_nearest(r, Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
            let pts: [Vector3<f64>; 3] = std::array::from_fn(|_| {
                truth.camera_to_world(&Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.0..5.0)))
            });
            let bearings = pts.map(|x| truth.world_to_camera(&x).normalize());
            let sols = p3p(&bearings, &pts);
            let best = sols
                .iter()
                .map(|p| (p.rotation() - truth.rotation()).norm() + (p.center() - truth.center()).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6, "best {best} of {}", sols.len());
        }
    }

    #[test]
    fn robust_resection_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let truth = Pose::from_rotation_nearest(
            nadir_rotation::<f64>() * rotation_from_axis_angle(&Vector3::new(0.02, -0.03, 0.1)),
            Vector3::new(3.0, 0.2, 2.0),
        );
        let mut pts = Vec::new();
        let mut px = Vec::new();
        while pts.len() < 120 {
            let x = Vector3::new(rng.random_range(1.5..4.5), rng.random_range(-0.8..1.2), rng.random_range(-0.1..0.1));
            if let Some(p) = project_ideal(&truth, &x, &cam()) {
                pts.push(x);
                px.push(p);
            }
        }
        for k in 0..30 {
            px[k] += Vector2::new(rng.random_range(10.0..50.0), rng.random_range(-50.0..-10.0));
        }
        let res = resect(&pts, &px, &cam(), &ResectionConfig::default()).unwrap();
        assert!((res.pose.center() - truth.center()).norm() < 1e-8);
        assert!((res.pose.rotation() - truth.rotation()).norm() < 1e-8);
        assert_eq!(res.inliers.len(), 90);
    }

    #[test]
    fn lm_refinement_from_perturbed_start() {
        let truth = Pose::from_rotation_nearest(nadir_rotation(), Vector3::new(0.0, 0.0, 2.0));
        let pts: Vec<_> = (0..30)
            .map(|i| Vector3::new((i % 6) as f64 * 0.2 - 0.5, (i / 6) as f64 * 0.2 - 0.4, 0.01 * i as f64))
            .collect();
        let px: Vec<_> = pts.iter().map(|x| project_ideal(&truth, x, &cam()).unwrap()).collect();
        let start = retract_pose(&truth, &Vector6::new(0.01, -0.02, 0.01, 0.05, -0.03, 0.04));
        let refined = refine_pose(&start, &pts, &px, &cam(), 30);
        assert!((refined.center() - truth.center()).norm() < 1e-9);
    }
}
