//! Accuracy checks against synthetic ground truth: colored markers are found
//! in the images, placed on the local plane and compared with the true
//! marker centers up to a similarity.

use image::{RgbImage, RgbaImage};
use nalgebra::Vector3;

use crate::camera::{project, undistort_pixel, unproject};
use crate::similarity::{compare_to_reference, SimilarityError, SimilarityReport};
use crate::synthetic::texture::{classify_marker_hue, Marker, MARKER_HUES};
use crate::{CameraModel, PixelCoord, Plane, Pose};

/// Centroid of one hue blob in an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerObservation {
    pub hue: usize,
    /// Centroid in raster coordinates (column, row).
    pub pixel: PixelCoord,
    pub pixel_count: usize,
}

/// Hue blobs that do not touch the raster border and have at least
/// `min_pixels` pixels. One blob per hue is assumed per image.
fn detect_blobs(width: u32, height: u32, min_pixels: usize, hue_at: impl Fn(u32, u32) -> Option<usize>) -> Vec<MarkerObservation> {
    let mut acc = vec![(0.0f64, 0.0f64, 0usize, false); MARKER_HUES];
    for y in 0..height {
        for x in 0..width {
            if let Some(k) = hue_at(x, y) {
                let a = &mut acc[k];
                a.0 += f64::from(x);
                a.1 += f64::from(y);
                a.2 += 1;
                if x == 0 || y == 0 || x + 1 == width || y + 1 == height {
                    a.3 = true;
                }
            }
        }
    }
    acc.iter()
        .enumerate()
        .filter(|(_, a)| a.2 >= min_pixels && !a.3)
        .map(|(hue, a)| MarkerObservation {
            hue,
            pixel: PixelCoord::new(a.0 / a.2 as f64, a.1 / a.2 as f64),
            pixel_count: a.2,
        })
        .collect()
}

pub fn detect_markers(image: &RgbImage, min_pixels: usize) -> Vec<MarkerObservation> {
    detect_blobs(image.width(), image.height(), min_pixels, |x, y| classify_marker_hue(image.get_pixel(x, y).0))
}

/// Same as [`detect_markers`] on a rectified tile; transparent pixels are
/// ignored and blobs touching transparency are kept.
pub fn detect_markers_rgba(image: &RgbaImage, min_pixels: usize) -> Vec<MarkerObservation> {
    detect_blobs(image.width(), image.height(), min_pixels, |x, y| {
        let p = image.get_pixel(x, y);
        if p[3] == 0 {
            None
        } else {
            classify_marker_hue([p[0], p[1], p[2]])
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerEstimate {
    pub hue: usize,
    pub first_frame: u64,
    pub position: Vector3<f64>,
    pub observations: usize,
}

#[derive(Debug, Clone)]
struct Cluster {
    hue: usize,
    first_frame: u64,
    sum: Vector3<f64>,
    count: usize,
}

/// Accumulates plane intersections of marker centroids over frames.
#[derive(Debug, Clone, Default)]
pub struct MarkerSurvey {
    clusters: Vec<Cluster>,
}

impl MarkerSurvey {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places each observation on `plane`. Observations of one hue closer
    /// than twice the camera-to-plane distance join the same cluster.
    pub fn add(&mut self, frame_id: u64, observations: &[MarkerObservation], pose: &Pose, camera: &CameraModel, plane: &Plane) {
        let range = 2.0 * plane.signed_distance(pose.center()).abs();
        for obs in observations {
            let Ok(ideal) = undistort_pixel(obs.pixel, camera) else { continue };
            let ray = unproject(ideal, pose, camera);
            let Some(x) = plane.intersect_ray(&ray, 0.0) else { continue };
            let near = self
                .clusters
                .iter_mut()
                .filter(|c| c.hue == obs.hue && (c.sum / c.count as f64 - x).norm() < range)
                .min_by(|a, b| {
                    let da = (a.sum / a.count as f64 - x).norm();
                    let db = (b.sum / b.count as f64 - x).norm();
                    da.total_cmp(&db)
                });
            match near {
                Some(c) => {
                    c.sum += x;
                    c.count += 1;
                }
                None => self.clusters.push(Cluster {
                    hue: obs.hue,
                    first_frame: frame_id,
                    sum: x,
                    count: 1,
                }),
            }
        }
    }

    pub fn estimates(&self) -> Vec<MarkerEstimate> {
        self.clusters
            .iter()
            .map(|c| MarkerEstimate {
                hue: c.hue,
                first_frame: c.first_frame,
                position: c.sum / c.count as f64,
                observations: c.count,
            })
            .collect()
    }
}

/// Pairs estimates with true markers: same hue, and visible from the true
/// pose of the frame where the estimate was first seen.
pub fn associate_markers<'a>(
    estimates: &[MarkerEstimate],
    truth: &'a [Marker],
    true_pose: impl Fn(u64) -> Option<Pose>,
    camera: &CameraModel,
) -> Vec<(MarkerEstimate, &'a Marker)> {
    let mut out: Vec<(MarkerEstimate, &Marker)> = Vec::new();
    for e in estimates {
        let Some(pose) = true_pose(e.first_frame) else { continue };
        let candidate = truth
            .iter()
            .filter(|m| m.id % MARKER_HUES == e.hue)
            .filter(|m| {
                project(&m.center, &pose, camera, true).is_ok_and(|p| camera.contains(p, 0.0))
            })
            .min_by(|a, b| {
                let da = (a.center - pose.center()).norm();
                let db = (b.center - pose.center()).norm();
                da.total_cmp(&db)
            });
        if let Some(m) = candidate {
            if !out.iter().any(|(_, used)| used.id == m.id) {
                out.push((e.clone(), m));
            }
        }
    }
    out
}

/// Similarity fit of associated estimates onto the true centers.
pub fn marker_similarity(pairs: &[(MarkerEstimate, &Marker)]) -> Result<SimilarityReport<f64>, SimilarityError> {
    let est: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.position).collect();
    let truth: Vec<Vector3<f64>> = pairs.iter().map(|(_, m)| m.center).collect();
    compare_to_reference(&est, &truth)
}

/// Similarity fit of estimated camera centers onto the true ones. Each
/// frame also contributes a point one mean frame spacing along its optical
/// axis, which pins the roll about a straight strip. Residuals and RMS cover
/// the centers only.
pub fn trajectory_similarity(est: &[Pose], truth: &[Pose]) -> Result<SimilarityReport<f64>, SimilarityError> {
    if est.len() != truth.len() {
        return Err(SimilarityError::LengthMismatch(est.len(), truth.len()));
    }
    if est.len() < 2 {
        return Err(SimilarityError::TooFewCorrespondences(est.len()));
    }
    let augment = |poses: &[Pose]| -> Vec<Vector3<f64>> {
        let step = poses.windows(2).map(|w| (w[1].center() - w[0].center()).norm()).sum::<f64>() / (poses.len() - 1) as f64;
        let mut pts: Vec<Vector3<f64>> = poses.iter().map(|p| *p.center()).collect();
        pts.extend(poses.iter().map(|p| p.center() + p.viewing_direction() * step));
        pts
    };
    let fit = compare_to_reference(&augment(est), &augment(truth))?;
    let residuals: Vec<f64> = est
        .iter()
        .zip(truth)
        .map(|(e, t)| (fit.apply(e.center()) - t.center()).norm())
        .collect();
    let sum_sq: f64 = residuals.iter().map(|r| r * r).sum();
    let n = residuals.len() as f64;
    Ok(SimilarityReport {
        rms: (sum_sq / (3.0 * n)).sqrt(),
        rms_3d: (sum_sq / n).sqrt(),
        residuals,
        ..fit
    })
}
