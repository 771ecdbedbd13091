//! Pinhole camera with Brown–Conrady lens distortion.
//!
//! Pixel convention: the center of the top-left pixel is `(0, 0)`, `u` grows
//! rightward and `v` downward. The camera frame has `x` right, `y` down and
//! `z` along the optical axis. [`Pose`] stores the camera-to-world transform.

use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::keyvalue::{KeyValueError, KeyValues};
use crate::scalar::Scalar;

const UNDISTORT_MAX_ITERATIONS: usize = 20;
const UNDISTORT_TOLERANCE: f64 = 1e-6;
const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("undistortion did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("rotation is not orthonormal with determinant +1 (error {error:e})")]
    InvalidRotation { error: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Format(#[from] KeyValueError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Raster coordinate in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord<T> {
    pub u: T,
    pub v: T,
}

impl<T: Scalar> PixelCoord<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Self) -> T {
        let du = self.u - other.u;
        let dv = self.v - other.v;
        (du * du + dv * dv).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

/// Radial (`k1..k3`) and tangential (`p1`, `p2`) coefficients on normalized
/// image coordinates. All zeros is an ideal pinhole.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionCoefficients<T> {
    pub k1: T,
    pub k2: T,
    pub k3: T,
    pub p1: T,
    pub p2: T,
}

impl<T: Scalar> Default for DistortionCoefficients<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Scalar> DistortionCoefficients<T> {
    pub fn zero() -> Self {
        Self {
            k1: T::zero(),
            k2: T::zero(),
            k3: T::zero(),
            p1: T::zero(),
            p2: T::zero(),
        }
    }

    pub fn radial(k1: T, k2: T, k3: T) -> Self {
        Self {
            k1,
            k2,
            k3,
            ..Self::zero()
        }
    }

    pub fn is_zero(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
            .iter()
            .all(|c| c.is_zero())
    }

    fn is_finite(&self) -> bool {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
            .iter()
            .all(|c| c.is_finite())
    }

    /// Applies the forward model to normalized coordinates.
    pub fn distort(&self, p: Vector2<T>) -> Vector2<T> {
        let two = T::lit(2.0);
        let (x, y) = (p.x, p.y);
        let r2 = x * x + y * y;
        let radial = T::one() + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
        let dx = two * self.p1 * x * y + self.p2 * (r2 + two * x * x);
        let dy = self.p1 * (r2 + two * y * y) + two * self.p2 * x * y;
        Vector2::new(x * radial + dx, y * radial + dy)
    }

    /// Inverts [`Self::distort`] by fixed-point iteration.
    pub fn undistort(&self, distorted: Vector2<T>) -> Result<Vector2<T>, GeometryError> {
        if self.is_zero() {
            return Ok(distorted);
        }
        let two = T::lit(2.0);
        let tol = T::lit(UNDISTORT_TOLERANCE);
        let mut p = distorted;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let (x, y) = (p.x, p.y);
            let r2 = x * x + y * y;
            let radial = T::one() + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3));
            let dx = two * self.p1 * x * y + self.p2 * (r2 + two * x * x);
            let dy = self.p1 * (r2 + two * y * y) + two * self.p2 * x * y;
            let next = Vector2::new(
                (distorted.x - dx) / radial,
                (distorted.y - dy) / radial,
            );
            if !(next.x.is_finite() && next.y.is_finite()) {
                break;
            }
            let step = (next - p).norm();
            p = next;
            if step < tol {
                return Ok(p);
            }
        }
        Err(GeometryError::NoConvergence {
            iterations: UNDISTORT_MAX_ITERATIONS,
        })
    }
}

/// Intrinsics and distortion of a pre-calibrated camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
    pub distortion: DistortionCoefficients<T>,
}

impl<T: Scalar> CameraModel<T> {
    pub fn new(
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: u32,
        height: u32,
        distortion: DistortionCoefficients<T>,
    ) -> Result<Self, GeometryError> {
        let camera = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            distortion,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Ideal pinhole with the principal point at the raster center.
    pub fn pinhole(focal: T, width: u32, height: u32) -> Result<Self, GeometryError> {
        let half = T::lit(0.5);
        Self::new(
            focal,
            focal,
            T::lit(f64::from(width) - 1.0) * half,
            T::lit(f64::from(height) - 1.0) * half,
            width,
            height,
            DistortionCoefficients::zero(),
        )
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx.is_finite() && self.fy.is_finite() && self.cx.is_finite() && self.cy.is_finite())
        {
            return Err(GeometryError::NonFinite("camera intrinsics"));
        }
        if !self.distortion.is_finite() {
            return Err(GeometryError::NonFinite("distortion coefficients"));
        }
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(GeometryError::InvalidCamera(
                "focal lengths must be positive".into(),
            ));
        }
        let w = T::lit(f64::from(self.width));
        let h = T::lit(f64::from(self.height));
        if !(self.cx > T::zero() && self.cx < w && self.cy > T::zero() && self.cy < h) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({:?}, {:?}) outside the {}x{} raster",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn intrinsic_matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(self.fx, z, self.cx, z, self.fy, self.cy, z, z, o)
    }

    pub fn normalized_to_pixel(&self, p: Vector2<T>) -> PixelCoord<T> {
        PixelCoord::new(self.fx * p.x + self.cx, self.fy * p.y + self.cy)
    }

    pub fn pixel_to_normalized(&self, pixel: PixelCoord<T>) -> Vector2<T> {
        Vector2::new((pixel.u - self.cx) / self.fx, (pixel.v - self.cy) / self.fy)
    }

    /// Maps an ideal (undistorted) pixel to where the lens images it.
    pub fn distort_pixel(&self, pixel: PixelCoord<T>) -> PixelCoord<T> {
        if self.distortion.is_zero() {
            return pixel;
        }
        self.normalized_to_pixel(self.distortion.distort(self.pixel_to_normalized(pixel)))
    }

    /// Scales the model for a raster downsampled by `divisor`.
    pub fn downscaled(&self, divisor: u32) -> Result<Self, GeometryError> {
        let d = T::lit(f64::from(divisor));
        let half = T::lit(0.5);
        // Pixel-center convention: source center c maps to (c + 0.5) / d - 0.5.
        Self::new(
            self.fx / d,
            self.fy / d,
            (self.cx + half) / d - half,
            (self.cy + half) / d - half,
            self.width / divisor,
            self.height / divisor,
            self.distortion,
        )
    }

    pub fn contains(&self, pixel: PixelCoord<T>, margin_fraction: T) -> bool {
        let w = T::lit(f64::from(self.width));
        let h = T::lit(f64::from(self.height));
        let mu = w * margin_fraction;
        let mv = h * margin_fraction;
        pixel.u >= -mu - T::lit(0.5)
            && pixel.u <= w - T::lit(0.5) + mu
            && pixel.v >= -mv - T::lit(0.5)
            && pixel.v <= h - T::lit(0.5) + mv
    }
}

impl CameraModel<f64> {
    /// Reads a calibration file of `key = value` lines.
    ///
    /// Required: `fx fy cx cy width height`. Optional: `k1 k2 k3 p1 p2`
    /// (default 0). Higher-order coefficients are ignored with a warning.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, CalibrationError> {
        const KNOWN: [&str; 11] = [
            "fx", "fy", "cx", "cy", "width", "height", "k1", "k2", "k3", "p1", "p2",
        ];
        for key in kv.keys() {
            if !KNOWN.contains(&key) {
                log::warn!("calibration key `{key}` is not part of the distortion model; ignored");
            }
        }
        let distortion = DistortionCoefficients {
            k1: kv.get_or("k1", 0.0)?,
            k2: kv.get_or("k2", 0.0)?,
            k3: kv.get_or("k3", 0.0)?,
            p1: kv.get_or("p1", 0.0)?,
            p2: kv.get_or("p2", 0.0)?,
        };
        Ok(Self::new(
            kv.require("fx")?,
            kv.require("fy")?,
            kv.require("cx")?,
            kv.require("cy")?,
            kv.require("width")?,
            kv.require("height")?,
            distortion,
        )?)
    }

    pub fn from_calibration_file(path: &Path) -> Result<Self, CalibrationError> {
        Self::from_key_values(&KeyValues::from_file(path)?)
    }

    pub fn to_calibration_text(&self) -> String {
        let d = &self.distortion;
        format!(
            "fx = {:?}\nfy = {:?}\ncx = {:?}\ncy = {:?}\nwidth = {}\nheight = {}\nk1 = {:?}\nk2 = {:?}\nk3 = {:?}\np1 = {:?}\np2 = {:?}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height, d.k1, d.k2, d.k3, d.p1, d.p2
        )
    }
}

/// Rigid camera-to-world transform: `X_world = rotation * X_cam + center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Scalar> {
    rotation: Matrix3<T>,
    center: Vector3<T>,
}

impl<T: Scalar> Pose<T> {
    /// Validates orthonormality and handedness of `rotation`.
    pub fn new(rotation: Matrix3<T>, center: Vector3<T>) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) || !center.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - T::one()).abs();
        let error = if ortho > det { ortho } else { det };
        if error > T::structural_tolerance() {
            return Err(GeometryError::InvalidRotation {
                error: error.to_f64_lossy(),
            });
        }
        Ok(Self { rotation, center })
    }

    /// Builds a pose from a rotation that is already known to be valid,
    /// re-orthonormalizing it through its polar decomposition.
    pub fn from_rotation_nearest(rotation: Matrix3<T>, center: Vector3<T>) -> Self {
        Self {
            rotation: nearest_rotation(&rotation),
            center,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<T> {
        &self.rotation
    }

    pub fn center(&self) -> &Vector3<T> {
        &self.center
    }

    pub fn world_to_camera(&self, point: &Vector3<T>) -> Vector3<T> {
        self.rotation.tr_mul(&(point - self.center))
    }

    pub fn camera_to_world(&self, point: &Vector3<T>) -> Vector3<T> {
        self.rotation * point + self.center
    }

    /// Optical axis in world coordinates.
    pub fn viewing_direction(&self) -> Vector3<T> {
        self.rotation.column(2).into_owned()
    }

    /// Applies a world-frame rigid motion `X -> motion_rotation * X + translation`.
    pub fn transformed(&self, motion_rotation: &Matrix3<T>, translation: &Vector3<T>) -> Self {
        Self::from_rotation_nearest(
            motion_rotation * self.rotation,
            motion_rotation * self.center + translation,
        )
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|v| U::lit(v.to_f64_lossy())),
            center: self.center.map(|v| U::lit(v.to_f64_lossy())),
        }
    }
}

/// Projects the rotation part of a near-orthonormal matrix onto SO(3).
pub fn nearest_rotation<T: Scalar>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * vt;
    if r.determinant() < T::zero() {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}

/// Half-line in world coordinates with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T: Scalar> {
    pub origin: Vector3<T>,
    pub direction: Vector3<T>,
}

impl<T: Scalar> Ray<T> {
    pub fn at(&self, t: T) -> Vector3<T> {
        self.origin + self.direction * t
    }
}

/// Projects a world point to raster coordinates.
pub fn project<T: Scalar>(
    point: &Vector3<T>,
    pose: &Pose<T>,
    camera: &CameraModel<T>,
    apply_distortion: bool,
) -> Result<PixelCoord<T>, GeometryError> {
    let pc = pose.world_to_camera(point);
    if pc.z <= T::lit(MIN_DEPTH) {
        return Err(GeometryError::BehindCamera {
            depth: pc.z.to_f64_lossy(),
        });
    }
    let mut n = Vector2::new(pc.x / pc.z, pc.y / pc.z);
    if apply_distortion {
        n = camera.distortion.distort(n);
    }
    Ok(camera.normalized_to_pixel(n))
}

/// Back-projects an undistorted pixel to a world ray from the camera center.
pub fn unproject<T: Scalar>(pixel: PixelCoord<T>, pose: &Pose<T>, camera: &CameraModel<T>) -> Ray<T> {
    let n = camera.pixel_to_normalized(pixel);
    let dir_cam = Vector3::new(n.x, n.y, T::one()).normalize();
    Ray {
        origin: pose.center,
        direction: (pose.rotation * dir_cam).normalize(),
    }
}

/// Removes lens distortion from an observed pixel.
pub fn undistort_pixel<T: Scalar>(
    pixel: PixelCoord<T>,
    camera: &CameraModel<T>,
) -> Result<PixelCoord<T>, GeometryError> {
    if camera.distortion.is_zero() {
        return Ok(pixel);
    }
    let n = camera.distortion.undistort(camera.pixel_to_normalized(pixel))?;
    Ok(camera.normalized_to_pixel(n))
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle<T: Scalar>(w: &Vector3<T>) -> Matrix3<T> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < T::lit(1e-24) {
        return Matrix3::identity() + k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (T::one() - theta.cos()) / theta2;
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix.
pub fn axis_angle_from_rotation<T: Scalar>(r: &Matrix3<T>) -> Vector3<T> {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    rot.scaled_axis()
}

pub fn skew<T: Scalar>(w: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -w.z, w.y, w.z, z, -w.x, -w.y, w.x, z)
}

/// Camera-to-world rotation of a camera looking straight down (`-z` world)
/// with image `u` along world `+x` and image `v` along world `-y`.
pub fn nadir_rotation<T: Scalar>() -> Matrix3<T> {
    let (z, o) = (T::zero(), T::one());
    Matrix3::new(o, z, z, z, -o, z, z, z, -o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraModel<f64> {
        CameraModel::new(1000.0, 1000.0, 500.0, 400.0, 1000, 800, DistortionCoefficients::zero())
            .unwrap()
    }

    fn distorted_camera() -> CameraModel<f64> {
        CameraModel::new(
            900.0,
            905.0,
            480.0,
            370.0,
            968,
            728,
            DistortionCoefficients {
                k1: -0.21,
                k2: 0.08,
                k3: -0.01,
                p1: 0.0012,
                p2: -0.0007,
            },
        )
        .unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        let w = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let c = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
        );
        Pose::new(rotation_from_axis_angle(&w), c).unwrap()
    }

    #[test]
    fn principal_point_projection() {
        let px = project(&Vector3::new(0.0, 0.0, 2.0), &Pose::identity(), &camera(), true).unwrap();
        assert_eq!(px, PixelCoord::new(500.0, 400.0));
    }

    #[test]
    fn lateral_offset_projection() {
        // u = cx + fx * x / z = 500 + 1000 * 0.2 / 2
        let px = project(&Vector3::new(0.2, 0.0, 2.0), &Pose::identity(), &camera(), false).unwrap();
        assert_relative_eq!(px.u, 600.0, epsilon = 1e-12);
        assert_relative_eq!(px.v, 400.0, epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = project(&Vector3::new(0.0, 0.0, -1.0), &Pose::identity(), &camera(), false);
        assert!(matches!(err, Err(GeometryError::BehindCamera { .. })));
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let cam = camera();
        let ray = unproject(PixelCoord::new(cam.cx, cam.cy), &Pose::identity(), &cam);
        assert_relative_eq!(ray.direction, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
        assert_eq!(ray.origin, Vector3::zeros());
    }

    #[test]
    fn focal_offset_ray_is_45_degrees() {
        let cam = camera();
        let ray = unproject(PixelCoord::new(cam.cx + cam.fx, cam.cy), &Pose::identity(), &cam);
        let expected = Vector3::new(1.0, 0.0, 1.0).normalize();
        assert_relative_eq!(ray.direction, expected, epsilon = 1e-15);
    }

    #[test]
    fn unproject_project_round_trip() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let pc = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..10.0),
            );
            let p = pose.camera_to_world(&pc);
            let px = project(&p, &pose, &cam, false).unwrap();
            let ray = unproject(px, &pose, &cam);
            let t = (p - ray.origin).dot(&ray.direction);
            assert!((ray.at(t) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_distortion_undistort_is_identity() {
        let cam = camera();
        let px = PixelCoord::new(12.25, 733.5);
        assert_eq!(undistort_pixel(px, &cam).unwrap(), px);
    }

    #[test]
    fn principal_point_is_radial_fixed_point() {
        let mut cam = distorted_camera();
        cam.distortion.p1 = 0.0;
        cam.distortion.p2 = 0.0;
        let pp = PixelCoord::new(cam.cx, cam.cy);
        let out = undistort_pixel(pp, &cam).unwrap();
        assert_relative_eq!(out.u, cam.cx, epsilon = 1e-12);
        assert_relative_eq!(out.v, cam.cy, epsilon = 1e-12);
    }

    #[test]
    fn distort_undistort_round_trip() {
        let cam = distorted_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let ideal = PixelCoord::new(
                rng.random_range(0.0..f64::from(cam.width - 1)),
                rng.random_range(0.0..f64::from(cam.height - 1)),
            );
            let observed = cam.distort_pixel(ideal);
            let back = undistort_pixel(observed, &cam).unwrap();
            assert!(back.distance(&ideal) < 1e-3, "{ideal:?} -> {back:?}");
        }
    }

    #[test]
    fn pathological_distortion_does_not_converge() {
        let mut cam = camera();
        cam.distortion.k1 = 40.0;
        let err = undistort_pixel(PixelCoord::new(990.0, 790.0), &cam);
        assert!(matches!(err, Err(GeometryError::NoConvergence { .. })));
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        let d = DistortionCoefficients::zero();
        assert!(CameraModel::new(-1.0, 1.0, 5.0, 5.0, 10, 10, d).is_err());
        assert!(CameraModel::new(1.0, 1.0, 15.0, 5.0, 10, 10, d).is_err());
        assert!(CameraModel::new(1.0, 1.0, 5.0, 0.0, 10, 10, d).is_err());
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-6;
        assert!(matches!(
            Pose::new(m, Vector3::zeros()),
            Err(GeometryError::InvalidRotation { .. })
        ));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Pose::new(reflection, Vector3::zeros()).is_err());
    }

    #[test]
    fn projection_is_rigid_motion_equivariant() {
        let cam = distorted_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let p = pose.camera_to_world(&Vector3::new(0.1, -0.2, 3.0));
            let motion = rotation_from_axis_angle(&Vector3::new(0.3, -1.2, 0.7));
            let shift = Vector3::new(4.0, -2.0, 9.0);
            let a = project(&p, &pose, &cam, true).unwrap();
            let b = project(&(motion * p + shift), &pose.transformed(&motion, &shift), &cam, true)
                .unwrap();
            assert!(a.distance(&b) < 1e-8);
        }
    }

    #[test]
    fn single_precision_round_trip() {
        let cam = CameraModel::<f32>::pinhole(800.0, 968, 728).unwrap();
        let pose = Pose::<f32>::new(nadir_rotation(), Vector3::new(0.5, 1.0, 2.0)).unwrap();
        let p = Vector3::new(0.7f32, 0.4, 0.0);
        let px = project(&p, &pose, &cam, false).unwrap();
        let ray = unproject(px, &pose, &cam);
        let t = (p - ray.origin).dot(&ray.direction);
        assert!((ray.at(t) - p).norm() < 1e-5);
    }

    #[test]
    fn calibration_ingest_defaults_and_ignores_extras() {
        let kv = KeyValues::parse(
            "fx = 800\nfy = 801\ncx = 483.5\ncy = 363.5\nwidth = 968\nheight = 728\nk1 = -0.1\nk4 = 0.5\n",
        )
        .unwrap();
        let cam = CameraModel::from_key_values(&kv).unwrap();
        assert_eq!(cam.distortion.k1, -0.1);
        assert_eq!(cam.distortion.k2, 0.0);
        assert_eq!(cam.distortion.p2, 0.0);
        let again = CameraModel::from_key_values(&KeyValues::parse(&cam.to_calibration_text()).unwrap())
            .unwrap();
        assert_eq!(again, cam);
    }

    #[test]
    fn downscale_keeps_pixel_center_convention() {
        let cam = CameraModel::<f64>::pinhole(1600.0, 1936, 1456).unwrap();
        let half = cam.downscaled(2).unwrap();
        assert_eq!((half.width, half.height), (968, 728));
        assert_relative_eq!(half.cx, 483.5);
        assert_relative_eq!(half.fx, 800.0);
    }
}
