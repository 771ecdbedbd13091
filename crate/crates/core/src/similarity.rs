//! Closed-form 7-parameter similarity alignment between corresponding point
//! sets, used to score reconstructions against ground truth.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("point and reference counts differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correspondences are collinear or coincident")]
    DegenerateConfiguration,
}

/// `reference ≈ scale * rotation * point + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport<T: Scalar> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
    /// Euclidean residual per correspondence after alignment.
    pub residuals: Vec<T>,
    /// Per-coordinate RMS: `sqrt(sum |r_i|^2 / (3 N))`.
    pub rms: T,
    /// Per-point RMS: `sqrt(sum |r_i|^2 / N)`.
    pub rms_3d: T,
}

impl<T: Scalar> SimilarityReport<T> {
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Absolute orientation with scale (centroid alignment, SVD of the
/// cross-covariance, scale from the variance ratio).
pub fn compare_to_reference<T: Scalar>(
    points: &[Vector3<T>],
    reference: &[Vector3<T>],
) -> Result<SimilarityReport<T>, SimilarityError> {
    let n = points.len();
    if n != reference.len() {
        return Err(SimilarityError::LengthMismatch(n, reference.len()));
    }
    if n < 3 {
        return Err(SimilarityError::TooFewCorrespondences(n));
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mean_p = points.iter().fold(Vector3::zeros(), |a, p| a + p) * inv_n;
    let mean_r = reference.iter().fold(Vector3::zeros(), |a, p| a + p) * inv_n;

    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_p = T::zero();
    for (p, r) in points.iter().zip(reference) {
        let dp = p - mean_p;
        let dr = r - mean_r;
        cross += dr * dp.transpose();
        scatter += dp * dp.transpose();
        var_p += dp.norm_squared();
    }
    cross *= inv_n;
    scatter *= inv_n;
    var_p *= inv_n;

    // Collinear sets leave the rotation about their common axis undetermined.
    let spread = scatter.symmetric_eigenvalues();
    let mut sorted: Vec<T> = spread.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(sorted[0] > T::zero()) || sorted[1] <= sorted[0] * T::lit(1e-12) {
        return Err(SimilarityError::DegenerateConfiguration);
    }

    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Vector3::new(T::one(), T::one(), T::one());
    if (u.determinant() * vt.determinant()) < T::zero() {
        d.z = -T::one();
    }
    let rotation = u * Matrix3::from_diagonal(&d) * vt;
    let trace = svd.singular_values.component_mul(&d).sum();
    let scale = trace / var_p;
    let translation = mean_r - rotation * mean_p * scale;

    let residuals: Vec<T> = points
        .iter()
        .zip(reference)
        .map(|(p, r)| (rotation * p * scale + translation - r).norm())
        .collect();
    let sum_sq = residuals.iter().fold(T::zero(), |a, r| a + *r * *r);
    Ok(SimilarityReport {
        scale,
        rotation,
        translation,
        rms: (sum_sq * inv_n / T::lit(3.0)).sqrt(),
        rms_3d: (sum_sq * inv_n).sqrt(),
        residuals,
    })
}
