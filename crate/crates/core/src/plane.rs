//! Local projection plane estimation from the sparse tie-point cloud.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::Ray;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneError {
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("every sampled hypothesis was collinear")]
    DegenerateGeometry,
    #[error("best hypothesis has {found} inliers, {required} required")]
    InsufficientInliers { found: usize, required: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
}

/// Oriented plane `{X : normal · X = offset}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane<T: Scalar> {
    normal: Vector3<T>,
    offset: T,
}

impl<T: Scalar> Plane<T> {
    /// Normalizes `normal` (and scales `offset` accordingly).
    pub fn new(normal: Vector3<T>, offset: T) -> Self {
        let n = normal.norm();
        Self {
            normal: normal / n,
            offset: offset / n,
        }
    }

    pub fn through_point(normal: Vector3<T>, point: &Vector3<T>) -> Self {
        let n = normal.normalize();
        Self {
            offset: n.dot(point),
            normal: n,
        }
    }

    pub fn normal(&self) -> &Vector3<T> {
        &self.normal
    }

    pub fn offset(&self) -> T {
        self.offset
    }

    pub fn signed_distance(&self, point: &Vector3<T>) -> T {
        self.normal.dot(point) - self.offset
    }

    pub fn project_point(&self, point: &Vector3<T>) -> Vector3<T> {
        point - self.normal * self.signed_distance(point)
    }

    /// Intersection of a ray with the plane, for hits in front of the origin
    /// whose incidence `|n . direction|` exceeds `min_sin` (unit direction).
    pub fn intersect_ray(&self, ray: &Ray<T>, min_sin: T) -> Option<Vector3<T>> {
        let denom = self.normal.dot(&ray.direction);
        if denom.abs() <= min_sin || denom == T::zero() {
            return None;
        }
        let t = (self.offset - self.normal.dot(&ray.origin)) / denom;
        (t > T::zero()).then(|| ray.at(t))
    }

    pub fn flipped(&self) -> Self {
        Self {
            normal: -self.normal,
            offset: -self.offset,
        }
    }

    /// Flips the plane so that most of `centers` lie on its positive side.
    pub fn oriented_toward(&self, centers: &[Vector3<T>]) -> Self {
        let positive = centers
            .iter()
            .filter(|c| self.signed_distance(c) > T::zero())
            .count();
        if positive * 2 < centers.len() {
            self.flipped()
        } else {
            *self
        }
    }

    /// Angle between the (unoriented) normals, in radians.
    pub fn angle_to(&self, other: &Self) -> T {
        let c = self.normal.dot(&other.normal).abs();
        let c = if c > T::one() { T::one() } else { c };
        c.acos()
    }

    /// Image of the plane under `X -> rotation * X + translation`.
    pub fn transformed(&self, rotation: &Matrix3<T>, translation: &Vector3<T>) -> Self {
        let n = rotation * self.normal;
        Self {
            offset: self.offset + n.dot(translation),
            normal: n,
        }
    }

    /// Canonical sign: the largest-magnitude normal component is positive.
    fn canonical(self) -> Self {
        let n = self.normal;
        let idx = n.iamax();
        if n[idx] < T::zero() {
            self.flipped()
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFitReport<T: Scalar> {
    pub inlier_count: usize,
    pub total_count: usize,
    /// Root-mean-square point-to-plane distance over the inliers.
    pub rms_residual: T,
    pub normal: Vector3<T>,
}

impl<T: Scalar> PlaneFitReport<T> {
    pub fn inlier_fraction(&self) -> f64 {
        if self.total_count == 0 {
            0.0
        } else {
            self.inlier_count as f64 / self.total_count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacPlaneParams<T> {
    /// Inlier distance threshold (world units).
    pub threshold: T,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub seed: u64,
}

impl<T: Scalar> RansacPlaneParams<T> {
    /// Threshold `0.02 * scene_scale`, 500 iterations, at least
    /// `max(20, 30 %)` inliers.
    pub fn for_scene(scene_scale: T, point_count: usize, seed: u64) -> Self {
        Self {
            threshold: scene_scale * T::lit(0.02),
            max_iterations: 500,
            min_inliers: default_min_inliers(point_count),
            seed,
        }
    }
}

pub fn default_min_inliers(point_count: usize) -> usize {
    20usize.max((point_count * 3).div_ceil(10))
}

/// Full output of a RANSAC fit, including which points were inliers.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit<T: Scalar> {
    pub plane: Plane<T>,
    pub report: PlaneFitReport<T>,
    pub inliers: Vec<usize>,
}

/// Robust plane fit: best 3-point hypothesis by inlier count (ties broken by
/// lower inlier RMS), then least-squares refinement over the inliers.
pub fn ransac_plane_fit<T: Scalar>(
    points: &[Vector3<T>],
    params: &RansacPlaneParams<T>,
) -> Result<(Plane<T>, PlaneFitReport<T>), PlaneError> {
    ransac_plane_fit_detailed(points, params).map(|fit| (fit.plane, fit.report))
}

pub fn ransac_plane_fit_detailed<T: Scalar>(
    points: &[Vector3<T>],
    params: &RansacPlaneParams<T>,
) -> Result<PlaneFit<T>, PlaneError> {
    let n = points.len();
    if n < 3 {
        return Err(PlaneError::TooFewPoints(n));
    }
    let extent = bounding_extent(points);
    let collinear_eps = extent * extent * T::lit(1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, T, Plane<T>)> = None;
    for _ in 0..params.max_iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        for taken in [i.min(j), i.max(j)] {
            if k >= taken {
                k += 1;
            }
        }
        let (a, b, c) = (points[i], points[j], points[k]);
        let cross = (b - a).cross(&(c - a));
        if cross.norm() <= collinear_eps {
            continue;
        }
        let hypothesis = Plane::through_point(cross, &a);
        let (count, sq) = score(points, &hypothesis, params.threshold);
        if count == 0 {
            continue;
        }
        let rms = (sq / T::lit(count as f64)).sqrt();
        let better = match &best {
            None => true,
            Some((bc, brms, _)) => count > *bc || (count == *bc && rms < *brms),
        };
        if better {
            best = Some((count, rms, hypothesis));
        }
    }
    let Some((count, _, hypothesis)) = best else {
        return Err(PlaneError::DegenerateGeometry);
    };
    if count < params.min_inliers {
        return Err(PlaneError::InsufficientInliers {
            found: count,
            required: params.min_inliers,
        });
    }

    let inliers = inlier_indices(points, &hypothesis, params.threshold);
    let mut plane = least_squares_plane(points, &inliers).unwrap_or(hypothesis);
    let mut refined_inliers = inlier_indices(points, &plane, params.threshold);
    if refined_inliers.len() >= 3 {
        if let Some(p) = least_squares_plane(points, &refined_inliers) {
            plane = p;
        }
    } else {
        refined_inliers = inliers;
    }
    plane = tighten(points, &refined_inliers, plane, params.threshold);
    let plane = plane.canonical();
    let rms = rms_distance(points, &refined_inliers, &plane);
    Ok(PlaneFit {
        plane,
        report: PlaneFitReport {
            inlier_count: refined_inliers.len(),
            total_count: n,
            rms_residual: rms,
            normal: plane.normal,
        },
        inliers: refined_inliers,
    })
}

fn bounding_extent<T: Scalar>(points: &[Vector3<T>]) -> T {
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let e = (hi - lo).norm();
    if e > T::zero() {
        e
    } else {
        T::one()
    }
}

fn score<T: Scalar>(points: &[Vector3<T>], plane: &Plane<T>, threshold: T) -> (usize, T) {
    let mut count = 0;
    let mut sq = T::zero();
    for p in points {
        let d = plane.signed_distance(p).abs();
        if d <= threshold {
            count += 1;
            sq += d * d;
        }
    }
    (count, sq)
}

fn inlier_indices<T: Scalar>(points: &[Vector3<T>], plane: &Plane<T>, threshold: T) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| plane.signed_distance(p).abs() <= threshold)
        .map(|(i, _)| i)
        .collect()
}

fn rms_distance<T: Scalar>(points: &[Vector3<T>], idx: &[usize], plane: &Plane<T>) -> T {
    if idx.is_empty() {
        return T::zero();
    }
    let mut sq = T::zero();
    for &i in idx {
        let d = plane.signed_distance(&points[i]);
        sq += d * d;
    }
    (sq / T::lit(idx.len() as f64)).sqrt()
}

/// Total least-squares plane: through the centroid, normal along the
/// smallest-eigenvalue eigenvector of the scatter matrix.
pub fn least_squares_plane<T: Scalar>(points: &[Vector3<T>], idx: &[usize]) -> Option<Plane<T>> {
    if idx.len() < 3 {
        return None;
    }
    let inv = T::one() / T::lit(idx.len() as f64);
    let mut centroid = Vector3::zeros();
    for &i in idx {
        centroid += points[i];
    }
    centroid *= inv;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - centroid;
        cov += d * d.transpose();
    }
    cov *= inv;
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imin();
    let normal = eig.eigenvectors.column(k).into_owned();
    if !normal.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Plane::through_point(normal, &centroid))
}

/// Refits on the core of the inlier band: points within three robust
/// standard deviations (from the median absolute residual), never narrower
/// than `1e-4 * threshold`. Near-plane outliers that pass the consensus
/// threshold stop biasing the fit when the inliers are much tighter.
fn tighten<T: Scalar>(points: &[Vector3<T>], inliers: &[usize], mut plane: Plane<T>, threshold: T) -> Plane<T> {
    for _ in 0..3 {
        let mut abs: Vec<T> = inliers.iter().map(|&i| plane.signed_distance(&points[i]).abs()).collect();
        if abs.len() < 3 {
            break;
        }
        abs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let sigma = abs[abs.len() / 2] * T::lit(1.4826);
        let band = (sigma * T::lit(3.0)).max(threshold * T::lit(1e-4));
        if band >= threshold {
            break;
        }
        let core: Vec<usize> = inliers
            .iter()
            .copied()
            .filter(|&i| plane.signed_distance(&points[i]).abs() <= band)
            .collect();
        if core.len() == inliers.len() || core.len() * 2 < inliers.len() {
            break;
        }
        match least_squares_plane(points, &core) {
            Some(p) => plane = p,
            None => break,
        }
    }
    plane
}

/// Horizontal plane (normal against gravity) at the median height of the
/// cloud along gravity.
pub fn horizontal_plane_from_ahrs<T: Scalar>(
    points: &[Vector3<T>],
    gravity_direction: &Vector3<T>,
) -> Result<Plane<T>, PlaneError> {
    if points.is_empty() {
        return Err(PlaneError::EmptyCloud);
    }
    let up = -gravity_direction.normalize();
    let mut heights: Vec<T> = points.iter().map(|p| up.dot(p)).collect();
    heights.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let m = heights.len() / 2;
    let offset = if heights.len() % 2 == 1 {
        heights[m]
    } else {
        (heights[m - 1] + heights[m]) * T::lit(0.5)
    };
    Ok(Plane::new(up, offset))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarityConfig {
    /// Maximum inlier RMS as a fraction of the scene scale.
    pub rel_residual_max: f64,
    pub min_inlier_fraction: f64,
}

impl Default for PlanarityConfig {
    fn default() -> Self {
        Self {
            rel_residual_max: 0.05,
            min_inlier_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanarityVerdict {
    Accept,
    SkipProjection,
}

/// Decides whether the scene is planar enough to project images onto the
/// fitted plane. `scene_scale` is the median camera-to-plane distance.
pub fn planarity_check<T: Scalar>(
    report: &PlaneFitReport<T>,
    scene_scale: T,
    config: &PlanarityConfig,
) -> PlanarityVerdict {
    let rms = report.rms_residual.to_f64_lossy();
    let scale = scene_scale.to_f64_lossy();
    if rms <= config.rel_residual_max * scale && report.inlier_fraction() >= config.min_inlier_fraction
    {
        PlanarityVerdict::Accept
    } else {
        PlanarityVerdict::SkipProjection
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, Normal};

    fn params(threshold: f64, seed: u64) -> RansacPlaneParams<f64> {
        RansacPlaneParams {
            threshold,
            max_iterations: 500,
            min_inliers: 20,
            seed,
        }
    }

    #[test]
    fn exact_plane_is_recovered() {
        let pts: Vec<_> = (0..100)
            .map(|i| Vector3::new((i % 10) as f64 * 0.3, (i / 10) as f64 * 0.2 - 1.0, 0.0))
            .collect();
        let (plane, report) = ransac_plane_fit(&pts, &params(0.01, 1)).unwrap();
        assert_relative_eq!(plane.normal().z.abs(), 1.0, epsilon = 1e-12);
        assert!(plane.offset().abs() < 1e-12);
        assert_eq!(report.rms_residual, 0.0);
        assert_eq!(report.inlier_count, 100);
    }

    #[test]
    fn noisy_plane_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut pts = Vec::new();
        for _ in 0..700 {
            pts.push(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                2.0 + noise.sample(&mut rng),
            ));
        }
        for _ in 0..300 {
            pts.push(Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.5..2.5),
            ));
        }
        let (plane, _) = ransac_plane_fit(&pts, &params(0.03, 9)).unwrap();
        let angle = plane.normal().dot(&Vector3::z()).abs().acos().to_degrees();
        assert!(angle < 0.5, "angle {angle}");
        assert!((plane.offset() - 2.0).abs() < 0.01);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        assert_eq!(
            ransac_plane_fit(&pts, &params(0.1, 0)).unwrap_err(),
            PlaneError::TooFewPoints(2)
        );
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts: Vec<_> = (0..30).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert_eq!(
            ransac_plane_fit(&pts, &params(0.1, 0)).unwrap_err(),
            PlaneError::DegenerateGeometry
        );
    }

    #[test]
    fn insufficient_inliers_reported() {
        let pts: Vec<_> = (0..10)
            .map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.37, (i * 7 % 5) as f64))
            .collect();
        let p = RansacPlaneParams {
            threshold: 1e-6,
            max_iterations: 100,
            min_inliers: 8,
            seed: 3,
        };
        assert!(matches!(
            ransac_plane_fit(&pts, &p),
            Err(PlaneError::InsufficientInliers { required: 8, .. })
        ));
    }

    #[test]
    fn ahrs_plane_at_median_height() {
        let pts = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(2.0, 0.0, 3.0)];
        let plane = horizontal_plane_from_ahrs(&pts, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(*plane.normal(), Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(plane.offset(), 2.0);

        let p = Vector3::new(1.5f64, -2.0, 0.25);
        let single = horizontal_plane_from_ahrs(&[p], &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert!(single.signed_distance(&p).abs() < 1e-15);

        let t = 10f64.to_radians();
        let tilted =
            horizontal_plane_from_ahrs(&pts, &Vector3::new(t.sin(), 0.0, -t.cos())).unwrap();
        let angle = tilted.normal().dot(&Vector3::z()).acos();
        assert_relative_eq!(angle, t, epsilon = 1e-12);

        assert_eq!(
            horizontal_plane_from_ahrs::<f64>(&[], &Vector3::new(0.0, 0.0, -1.0)).unwrap_err(),
            PlaneError::EmptyCloud
        );

        // A gross outlier does not move the height.
        let mut flat: Vec<Vector3<f64>> = (0..9).map(|k| Vector3::new(k as f64, 0.0, -2.0)).collect();
        flat.push(Vector3::new(0.0, 0.0, 40.0));
        let robust = horizontal_plane_from_ahrs(&flat, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(robust.offset(), -2.0);
    }

    #[test]
    fn near_plane_outlier_does_not_bias_exact_inliers() {
        let mut pts: Vec<Vector3<f64>> = (0..400)
            .map(|k| Vector3::new((k % 20) as f64 * 0.1, (k / 20) as f64 * 0.1, 0.0))
            .collect();
        // Inside the consensus band but far outside the inliers' spread.
        pts.push(Vector3::new(1.9, 1.9, 0.01));
        let p = RansacPlaneParams {
            threshold: 0.04,
            max_iterations: 200,
            min_inliers: 100,
            seed: 1,
        };
        let (plane, _) = ransac_plane_fit(&pts, &p).unwrap();
        assert!(plane.normal().z.abs() > 1.0 - 1e-15);
        assert!(plane.offset().abs() < 1e-14);
    }

    fn report(rms: f64, inliers: usize, total: usize) -> PlaneFitReport<f64> {
        PlaneFitReport {
            inlier_count: inliers,
            total_count: total,
            rms_residual: rms,
            normal: Vector3::z(),
        }
    }

    #[test]
    fn planarity_thresholds() {
        let cfg = PlanarityConfig::default();
        assert_eq!(planarity_check(&report(0.01, 90, 100), 2.0, &cfg), PlanarityVerdict::Accept);
        assert_eq!(
            planarity_check(&report(0.5, 90, 100), 2.0, &cfg),
            PlanarityVerdict::SkipProjection
        );
        assert_eq!(planarity_check(&report(0.0, 50, 100), 2.0, &cfg), PlanarityVerdict::Accept);
        assert_eq!(
            planarity_check(&report(0.0, 49, 100), 2.0, &cfg),
            PlanarityVerdict::SkipProjection
        );
    }

    #[test]
    fn orientation_toward_cameras() {
        let plane = Plane::new(Vector3::new(0.0, 0.0, -1.0), 0.0);
        let cams = [Vector3::new(0.0, 0.0, 2.0), Vector3::new(1.0, 0.0, 2.0)];
        let o = plane.oriented_toward(&cams);
        assert!(o.signed_distance(&cams[0]) > 0.0);
    }

    #[test]
    fn single_precision_fit() {
        let pts: Vec<Vector3<f32>> = (0..64)
            .map(|i| Vector3::new((i % 8) as f32 * 0.1, (i / 8) as f32 * 0.1, 0.5))
            .collect();
        let p = RansacPlaneParams {
            threshold: 1e-3f32,
            max_iterations: 50,
            min_inliers: 10,
            seed: 5,
        };
        let (plane, _) = ransac_plane_fit(&pts, &p).unwrap();
        assert!((plane.offset() - 0.5).abs() < 1e-5);
    }
}
