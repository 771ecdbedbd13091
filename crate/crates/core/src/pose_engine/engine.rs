//! Sequential pose engine: tracks features frame to frame, initializes a
//! block of `n` frames, registers each new frame by resection and refines the
//! latest `n` frames by bundle adjustment. In replay mode the poses come from a
//! trajectory and only the tie points are estimated.

use std::collections::{BTreeMap, HashMap, HashSet};

use image::RgbImage;
use nalgebra::{Matrix3, Vector2, Vector3};

use super::bundle::{bundle_adjust, BundleConfig, BundleProblem};
use super::epipolar::{decompose_homography, estimate_essential, homography_dlt, homography_error, EssentialRansacConfig};
use super::features::{match_features, refine_translation, FeatureConfig, FeatureSet};
use super::replay::ReplayProvider;
use super::resection::{resect, ResectionConfig};
use super::triangulate::{max_parallax, max_reprojection_error, triangulate};
use super::PoseError;
use crate::camera::undistort_pixel;
use crate::raster::{sample_bilinear, to_rgb8, GrayImage};
use crate::{CameraModel, PixelCoord, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameStatus {
    Pending,
    Tracked,
    Lost,
}

/// An acquired image with its (eventual) pose.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub image: RgbImage,
    pub pose: Option<Pose>,
    pub status: FrameStatus,
}

impl Frame {
    pub fn new(id: u64, timestamp: f64, image: RgbImage) -> Self {
        Self {
            id,
            timestamp,
            image,
            pose: None,
            status: FrameStatus::Pending,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiePoint {
    pub id: u64,
    pub position: Vector3<f64>,
    /// Undistorted pixel observations.
    pub observations: Vec<(u64, PixelCoord)>,
    pub color: [u8; 3],
}

/// The latest `size` tracked frames; `fixed` are older frames whose poses
/// are frozen but still constrain shared points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlidingWindow {
    pub size: usize,
    pub members: Vec<u64>,
    pub fixed: Vec<u64>,
}

impl SlidingWindow {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            members: Vec::new(),
            fixed: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u64) {
        self.members.push(id);
        if self.members.len() > self.size {
            self.members.remove(0);
        }
    }

    pub fn is_full(&self) -> bool {
        self.size > 0 && self.members.len() == self.size
    }

    pub fn clear(&mut self) {
        self.members.clear();
        self.fixed.clear();
    }
}

/// Central member of a full window.
pub fn select_keyframe(window: &SlidingWindow) -> Option<u64> {
    window.is_full().then(|| window.members[window.size / 2])
}

/// Forwards each keyframe id at most once, in increasing order.
#[derive(Debug, Clone, Default)]
pub struct KeyframeGuard {
    last: Option<u64>,
}

impl KeyframeGuard {
    pub fn admit(&mut self, id: u64) -> bool {
        if self.last.is_some_and(|l| id <= l) {
            return false;
        }
        self.last = Some(id);
        true
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Frames per adjustment window (three or five).
    pub window_size: usize,
    pub features: FeatureConfig,
    /// Essential matrix inlier threshold, pixels.
    pub essential_threshold: f64,
    pub essential_confidence: f64,
    pub resection: ResectionConfig,
    pub bundle: BundleConfig,
    pub min_init_inliers: usize,
    /// Median residual (pixels) of the best pure-rotation model below which
    /// two views are considered to lack parallax.
    pub min_init_parallax_px: f64,
    /// Minimum ray angle for triangulating a new point, degrees.
    pub min_triangulation_angle: f64,
    /// Length of the first baseline in monocular mode.
    pub initial_baseline: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            window_size: 5,
            features: FeatureConfig::default(),
            essential_threshold: 1.0,
            essential_confidence: 0.999,
            resection: ResectionConfig::default(),
            bundle: BundleConfig::default(),
            min_init_inliers: 40,
            min_init_parallax_px: 1.0,
            min_triangulation_angle: 1.0,
            initial_baseline: 1.0,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), PoseError> {
        if self.window_size < 3 {
            return Err(PoseError::InvalidInput("window size must be at least 3".into()));
        }
        if !(self.initial_baseline > 0.0) {
            return Err(PoseError::InvalidInput("initial baseline must be positive".into()));
        }
        Ok(())
    }
}

/// Keyframe forwarded downstream: the central frame of the window with the
/// tie points seen by the window.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    pub window_points: Vec<TiePoint>,
    /// Poses of the window members.
    pub window_poses: Vec<(u64, Pose)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameUpdate {
    pub frame_id: u64,
    pub timestamp: f64,
    pub status: FrameStatus,
    pub pose: Option<Pose>,
    /// Poses set or changed during this step (including `pose`).
    pub refined_poses: Vec<(u64, Pose)>,
    /// Tie points created or moved during this step.
    pub tie_points: Vec<TiePoint>,
    pub keyframe: Option<Keyframe>,
    /// RMS reprojection error of the window after adjustment, pixels.
    pub window_rms: Option<f64>,
}

#[derive(Debug, Clone)]
struct Track {
    /// Undistorted observations in frame order.
    observations: Vec<(u64, Vector2<f64>)>,
    /// Raw (distorted) position in the last observed frame.
    raw_last: PixelCoord,
    last_frame: u64,
    position: Option<Vector3<f64>>,
    color: [u8; 3],
    /// Observation count when the position was last computed.
    triangulated_with: usize,
}

struct PreviousFrame {
    id: u64,
    gray: GrayImage,
    features: FeatureSet,
    corner_track: Vec<Option<u64>>,
    rgb: RgbImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Initializing,
    Tracking,
    Lost,
}

pub enum PoseSource {
    VisualOdometry,
    Replay(ReplayProvider),
}

pub struct PoseEngine {
    camera: CameraModel,
    config: EngineConfig,
    source: PoseSource,
    phase: Phase,
    previous: Option<PreviousFrame>,
    tracks: HashMap<u64, Track>,
    next_track: u64,
    /// Poses of tracked frames (current map only).
    poses: BTreeMap<u64, Pose>,
    timestamps: BTreeMap<u64, f64>,
    /// Frames buffered before initialization.
    pending: Vec<u64>,
    window: SlidingWindow,
    guard: KeyframeGuard,
    last_id: Option<u64>,
}

impl PoseEngine {
    /// `camera` describes the images that will be fed (after any downscaling).
    pub fn new(camera: CameraModel, config: EngineConfig, source: PoseSource) -> Result<Self, PoseError> {
        config.validate()?;
        let window = SlidingWindow::new(config.window_size);
        Ok(Self {
            camera,
            config,
            source,
            phase: Phase::Initializing,
            previous: None,
            tracks: HashMap::new(),
            next_track: 0,
            poses: BTreeMap::new(),
            timestamps: BTreeMap::new(),
            pending: Vec::new(),
            window,
            guard: KeyframeGuard::default(),
            last_id: None,
        })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn window(&self) -> &SlidingWindow {
        &self.window
    }

    pub fn is_lost(&self) -> bool {
        self.phase == Phase::Lost
    }

    pub fn pose(&self, frame_id: u64) -> Option<Pose> {
        self.poses.get(&frame_id).copied()
    }

    /// Current tie points with a position.
    pub fn tie_points(&self) -> Vec<TiePoint> {
        let mut ids: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.position.is_some())
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        ids.into_iter().filter_map(|id| self.tie_point(id)).collect()
    }

    fn tie_point(&self, id: u64) -> Option<TiePoint> {
        let t = self.tracks.get(&id)?;
        let position = t.position?;
        (t.observations.len() >= 2).then(|| TiePoint {
            id,
            position,
            observations: t
                .observations
                .iter()
                .map(|(f, p)| (*f, PixelCoord::new(p.x, p.y)))
                .collect(),
            color: t.color,
        })
    }

    /// Discards the map and window after a failure; completed outputs are
    /// unaffected. Frame ids must keep increasing.
    pub fn restart(&mut self) {
        self.phase = Phase::Initializing;
        self.previous = None;
        self.tracks.clear();
        self.poses.clear();
        self.timestamps.clear();
        self.pending.clear();
        self.window.clear();
        self.guard.reset();
    }

    fn lost(&mut self, frame: u64, err: PoseError) -> PoseError {
        self.phase = Phase::Lost;
        log::warn!("pose engine stopped at frame {frame}: {err}");
        err
    }

    /// Processes the next frame of the stream.
    pub fn process(&mut self, id: u64, timestamp: f64, image: &RgbImage) -> Result<FrameUpdate, PoseError> {
        if self.last_id.is_some_and(|l| id <= l) {
            return Err(PoseError::InvalidInput(format!("frame id {id} is not increasing")));
        }
        if (image.width(), image.height()) != (self.camera.width, self.camera.height) {
            return Err(PoseError::InvalidInput(format!(
                "frame {id} is {}x{}, camera expects {}x{}",
                image.width(),
                image.height(),
                self.camera.width,
                self.camera.height
            )));
        }
        self.last_id = Some(id);
        if self.phase == Phase::Lost {
            return Err(PoseError::TrackingLost {
                frame: id,
                reason: "engine stopped; restart required".into(),
            });
        }
        self.timestamps.insert(id, timestamp);
        let gray = GrayImage::from_rgb(image);
        let features = FeatureSet::detect(&gray, &self.config.features);
        let replay = matches!(self.source, PoseSource::Replay(_));
        let link = self.link_tracks(id, &gray, &features);

        if replay {
            return self.process_replay(id, timestamp, gray, features, image, link);
        }
        let corner_track = match link {
            Ok(ct) => ct,
            Err(e) => {
                if self.previous.is_none() {
                    vec![None; features.len()]
                } else if self.phase == Phase::Initializing {
                    let err = PoseError::InitializationFailed(e.to_string());
                    return Err(self.lost(id, err));
                } else {
                    let err = PoseError::TrackingLost {
                        frame: id,
                        reason: e.to_string(),
                    };
                    return Err(self.lost(id, err));
                }
            }
        };
        self.previous = Some(PreviousFrame {
            id,
            gray,
            features,
            corner_track,
            rgb: image.clone(),
        });

        match self.phase {
            Phase::Initializing => {
                self.pending.push(id);
                if self.pending.len() < self.config.window_size {
                    return Ok(FrameUpdate {
                        frame_id: id,
                        timestamp,
                        status: FrameStatus::Pending,
                        pose: None,
                        refined_poses: Vec::new(),
                        tie_points: Vec::new(),
                        keyframe: None,
                        window_rms: None,
                    });
                }
                match self.initialize_block() {
                    Ok(rms) => {
                        self.phase = Phase::Tracking;
                        let ids = std::mem::take(&mut self.pending);
                        for f in &ids {
                            self.window.push(*f);
                        }
                        let refined = ids.iter().map(|f| (*f, self.poses[f])).collect();
                        Ok(self.finish_update(id, timestamp, refined, self.all_point_ids(), Some(rms)))
                    }
                    Err(e) => Err(self.lost(id, e)),
                }
            }
            Phase::Tracking => match self.register(id) {
                Ok((refined, touched, rms)) => Ok(self.finish_update(id, timestamp, refined, touched, Some(rms))),
                Err(e) => Err(self.lost(id, e)),
            },
            Phase::Lost => unreachable!(),
        }
    }

    fn all_point_ids(&self) -> Vec<u64> {
        self.tracks
            .iter()
            .filter(|(_, t)| t.position.is_some())
            .map(|(id, _)| *id)
            .collect()
    }

    fn finish_update(
        &mut self,
        id: u64,
        timestamp: f64,
        refined_poses: Vec<(u64, Pose)>,
        touched: Vec<u64>,
        window_rms: Option<f64>,
    ) -> FrameUpdate {
        let mut touched = touched;
        touched.sort_unstable();
        touched.dedup();
        let tie_points = touched.iter().filter_map(|t| self.tie_point(*t)).collect();
        let keyframe = self.next_keyframe();
        self.prune_tracks();
        FrameUpdate {
            frame_id: id,
            timestamp,
            status: FrameStatus::Tracked,
            pose: self.poses.get(&id).copied(),
            refined_poses,
            tie_points,
            keyframe,
            window_rms,
        }
    }

    fn next_keyframe(&mut self) -> Option<Keyframe> {
        let key = select_keyframe(&self.window)?;
        if !self.guard.admit(key) {
            return None;
        }
        let members: Vec<u64> = self.window.members.clone();
        let mut ids: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.position.is_some() && t.observations.iter().any(|(f, _)| members.contains(f)))
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        Some(Keyframe {
            frame_id: key,
            timestamp: self.timestamps.get(&key).copied().unwrap_or(0.0),
            pose: self.poses[&key],
            window_points: ids.into_iter().filter_map(|t| self.tie_point(t)).collect(),
            window_poses: members.iter().map(|m| (*m, self.poses[m])).collect(),
        })
    }

    /// Drops tracks that ended before the window and frame records that no
    /// remaining track references.
    fn prune_tracks(&mut self) {
        let Some(&oldest) = self.window.members.first() else { return };
        self.tracks.retain(|_, t| t.last_frame >= oldest);
        let horizon = self
            .tracks
            .values()
            .filter_map(|t| t.observations.first().map(|o| o.0))
            .min()
            .unwrap_or(oldest)
            .min(oldest);
        // Keep poses referenced by live tracks (fixed frames of the adjustment).
        let keep_from = horizon;
        let stale: Vec<u64> = self.poses.range(..keep_from).map(|(k, _)| *k).collect();
        for k in stale {
            self.poses.remove(&k);
            self.timestamps.remove(&k);
        }
    }

    /// Matches the frame against the previous one and extends tracks.
    fn link_tracks(
        &mut self,
        id: u64,
        gray: &GrayImage,
        features: &FeatureSet,
    ) -> Result<Vec<Option<u64>>, PoseError> {
        let mut corner_track = vec![None; features.len()];
        let Some(prev) = self.previous.as_ref() else {
            return Err(PoseError::TooFewMatches {
                found: 0,
                required: self.config.features.min_matches,
            });
        };
        let size = (gray.width(), gray.height());
        let matches = match_features(&prev.features, features, &self.config.features, size);
        let half = self.config.features.patch_size / 2;
        let mut linked = 0;
        let mut new_tracks = Vec::new();
        for m in &matches {
            let existing = prev.corner_track[m.index_a].filter(|t| self.tracks.contains_key(t));
            let template = match existing {
                Some(t) => self.tracks[&t].raw_last,
                None => m.pixel_a,
            };
            let start = PixelCoord::new(
                m.pixel_b.u + template.u - m.pixel_a.u,
                m.pixel_b.v + template.v - m.pixel_a.v,
            );
            let raw = if self.config.features.refine {
                match refine_translation(&prev.gray, template, gray, start, half) {
                    Some(p) => p,
                    None => continue,
                }
            } else {
                start
            };
            let Ok(ideal) = undistort_pixel(raw, &self.camera) else { continue };
            let ideal = Vector2::new(ideal.u, ideal.v);
            match existing {
                Some(t) => {
                    let track = self.tracks.get_mut(&t).expect("checked");
                    track.observations.push((id, ideal));
                    track.raw_last = raw;
                    track.last_frame = id;
                    corner_track[m.index_b] = Some(t);
                }
                None => {
                    let Ok(first) = undistort_pixel(template, &self.camera) else { continue };
                    let color = sample_bilinear(&prev.rgb, template).map_or([0, 0, 0], to_rgb8);
                    let tid = self.next_track;
                    self.next_track += 1;
                    new_tracks.push((
                        tid,
                        Track {
                            observations: vec![(prev.id, Vector2::new(first.u, first.v)), (id, ideal)],
                            raw_last: raw,
                            last_frame: id,
                            position: None,
                            color,
                            triangulated_with: 0,
                        },
                    ));
                    corner_track[m.index_b] = Some(tid);
                }
            }
            linked += 1;
        }
        log::debug!("frame {id}: {} matches, {linked} linked, {} new tracks", matches.len(), new_tracks.len());
        self.tracks.extend(new_tracks);
        if linked < self.config.features.min_matches {
            return Err(PoseError::TooFewMatches {
                found: linked,
                required: self.config.features.min_matches,
            });
        }
        Ok(corner_track)
    }

    fn observations_in(&self, frame: u64) -> Vec<(u64, Vector2<f64>)> {
        let mut out: Vec<(u64, Vector2<f64>)> = self
            .tracks
            .iter()
            .filter_map(|(id, t)| t.observations.iter().find(|o| o.0 == frame).map(|o| (*id, o.1)))
            .collect();
        out.sort_unstable_by_key(|o| o.0);
        out
    }

    fn normalized(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let n = self.camera.pixel_to_normalized(PixelCoord::new(px.x, px.y));
        Vector3::new(n.x, n.y, 1.0)
    }

    fn initialize_block(&mut self) -> Result<f64, PoseError> {
        let frames = self.pending.clone();
        let (f0, f1) = (frames[0], frames[1]);
        let mut ids = Vec::new();
        let mut x0 = Vec::new();
        let mut x1 = Vec::new();
        for (tid, t) in &self.tracks {
            let a = t.observations.iter().find(|o| o.0 == f0);
            let b = t.observations.iter().find(|o| o.0 == f1);
            if let (Some(a), Some(b)) = (a, b) {
                ids.push(*tid);
                x0.push(self.normalized(&a.1));
                x1.push(self.normalized(&b.1));
            }
        }
        let order = {
            let mut o: Vec<usize> = (0..ids.len()).collect();
            o.sort_by_key(|&k| ids[k]);
            o
        };
        let ids: Vec<u64> = order.iter().map(|&k| ids[k]).collect();
        let x0: Vec<Vector3<f64>> = order.iter().map(|&k| x0[k]).collect();
        let x1: Vec<Vector3<f64>> = order.iter().map(|&k| x1[k]).collect();
        if ids.len() < self.config.min_init_inliers {
            return Err(PoseError::InitializationFailed(format!(
                "only {} correspondences between the first two frames",
                ids.len()
            )));
        }
        if self.lacks_parallax(&x0, &x1) {
            return Err(PoseError::InitializationFailed(
                "insufficient parallax (motion is close to a pure rotation)".into(),
            ));
        }
        let cfg = EssentialRansacConfig {
            threshold: self.config.essential_threshold / self.camera.fx,
            confidence: self.config.essential_confidence,
            max_iterations: 1000,
            seed: self.config.seed ^ f1,
        };
        let rel = estimate_essential(&x0, &x1, &cfg)
            .ok_or_else(|| PoseError::InitializationFailed("essential matrix estimation failed".into()))?;
        if rel.inliers.len() < self.config.min_init_inliers {
            return Err(PoseError::InitializationFailed(format!(
                "only {} essential matrix inliers",
                rel.inliers.len()
            )));
        }
        // A planar scene admits two motions explaining every correspondence;
        // the later frames of the block decide between them.
        let mut candidates = vec![(rel.rotation, rel.translation)];
        let in0: Vec<Vector3<f64>> = rel.inliers.iter().map(|&k| x0[k]).collect();
        let in1: Vec<Vector3<f64>> = rel.inliers.iter().map(|&k| x1[k]).collect();
        if let Some(h) = homography_dlt(&in0, &in1) {
            let planar = in0
                .iter()
                .zip(&in1)
                .filter(|(a, b)| homography_error(&h, a, b) < cfg.threshold)
                .count();
            if planar * 10 >= in0.len() * 8 {
                for (r, t, _) in decompose_homography(&h) {
                    if t.norm() > 0.0 && !candidates.iter().any(|(r2, t2)| (r2 - r).norm() < 1e-6 && (t2 - t.normalize()).norm() < 1e-6) {
                        candidates.push((r, t.normalize()));
                    }
                }
            }
        }
        let inlier_set: HashSet<u64> = rel.inliers.iter().map(|&k| ids[k]).collect();
        let saved_tracks = self.tracks.clone();
        let mut best: Option<(f64, HashMap<u64, Track>, BTreeMap<u64, Pose>)> = None;
        let mut last_err = None;
        for (r, t) in candidates {
            self.tracks = saved_tracks.clone();
            self.poses.clear();
            match self.initialize_with(&frames, &r, &t, &ids, &inlier_set) {
                Ok(rms) => {
                    log::debug!("initialization candidate rms {rms:.4} px");
                    if best.as_ref().is_none_or(|b| rms < b.0) {
                        best = Some((rms, self.tracks.clone(), self.poses.clone()));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let Some((rms, tracks, poses)) = best else {
            self.tracks = saved_tracks;
            self.poses.clear();
            return Err(match last_err {
                Some(PoseError::InitializationFailed(m)) => PoseError::InitializationFailed(m),
                Some(e) => PoseError::InitializationFailed(e.to_string()),
                None => PoseError::InitializationFailed("no motion candidate".into()),
            });
        };
        self.tracks = tracks;
        self.poses = poses;
        Ok(rms)
    }

    /// Builds the block from a relative motion `x1 = R x0 + t` between the
    /// first two frames: triangulation, resection of the rest, adjustment and
    /// rescaling to the configured baseline.
    fn initialize_with(
        &mut self,
        frames: &[u64],
        rotation: &Matrix3<f64>,
        translation: &Vector3<f64>,
        ids: &[u64],
        inlier_set: &HashSet<u64>,
    ) -> Result<f64, PoseError> {
        let (f0, f1) = (frames[0], frames[1]);
        // Camera 1 rotation (camera-to-world) is R^T.
        let r1 = rotation.transpose();
        self.poses.insert(f0, Pose::identity());
        self.poses.insert(f1, Pose::from_rotation_nearest(r1, -r1 * translation));
        // Outlier correspondences do not take part in the initial structure.
        for (tid, t) in self.tracks.iter_mut() {
            if ids.binary_search(tid).is_ok() && !inlier_set.contains(tid) {
                t.observations.retain(|o| o.0 != f0 && o.0 != f1);
            }
        }
        self.triangulate_new(&[f0, f1]);
        for &f in &frames[2..] {
            let pose = self.resect_frame(f)?;
            self.poses.insert(f, pose);
            self.triangulate_new(frames);
        }
        // Full adjustment with the first frame fixed.
        let rms = self.adjust(frames, true)?;
        let c0 = *self.poses[&f0].center();
        let baseline = (self.poses[&f1].center() - c0).norm();
        if !(baseline > 0.0) {
            return Err(PoseError::InitializationFailed("degenerate baseline".into()));
        }
        let s = self.config.initial_baseline / baseline;
        for p in self.poses.values_mut() {
            *p = Pose::from_rotation_nearest(*p.rotation(), (p.center() - c0) * s + c0);
        }
        for t in self.tracks.values_mut() {
            if let Some(x) = t.position.as_mut() {
                *x = (*x - c0) * s + c0;
            }
        }
        Ok(rms)
    }

    /// True when a rotation alone explains the correspondences.
    fn lacks_parallax(&self, x0: &[Vector3<f64>], x1: &[Vector3<f64>]) -> bool {
        let b0: Vec<Vector3<f64>> = x0.iter().map(|v| v.normalize()).collect();
        let b1: Vec<Vector3<f64>> = x1.iter().map(|v| v.normalize()).collect();
        let mut h = Matrix3::zeros();
        for (a, b) in b0.iter().zip(&b1) {
            h += b * a.transpose();
        }
        let svd = h.svd(true, true);
        let (Some(u), Some(vt)) = (svd.u, svd.v_t) else { return true };
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * vt;
        let mut res: Vec<f64> = b0
            .iter()
            .zip(&b1)
            .map(|(a, b)| (r * a).cross(b).norm() * self.camera.fx)
            .collect();
        res.sort_by(f64::total_cmp);
        res[res.len() / 2] < self.config.min_init_parallax_px
    }

    fn resect_frame(&self, frame: u64) -> Result<Pose, PoseError> {
        let mut pts = Vec::new();
        let mut px = Vec::new();
        for (tid, obs) in self.observations_in(frame) {
            if let Some(x) = self.tracks[&tid].position {
                pts.push(x);
                px.push(obs);
            }
        }
        let cfg = ResectionConfig {
            seed: self.config.resection.seed ^ frame,
            ..self.config.resection.clone()
        };
        let found = pts.len();
        log::debug!("frame {frame}: resection from {found} tie points");
        let res = resect(&pts, &px, &self.camera, &cfg).ok_or_else(|| PoseError::TrackingLost {
            frame,
            reason: format!("resection failed with {found} tie points"),
        })?;
        if res.inliers.len() < cfg.min_inliers {
            return Err(PoseError::TrackingLost {
                frame,
                reason: format!("only {} resection inliers", res.inliers.len()),
            });
        }
        Ok(res.pose)
    }

    /// Triangulates tracks without a position whose observations all lie in
    /// posed frames, using those among `frames` and any other posed frame.
    fn triangulate_new(&mut self, frames: &[u64]) -> Vec<u64> {
        let min_angle = self.config.min_triangulation_angle.to_radians();
        let cutoff = self.config.bundle.outlier_threshold;
        let mut created = Vec::new();
        for (tid, t) in self.tracks.iter_mut() {
            if t.position.is_some() {
                continue;
            }
            if !t.observations.iter().any(|o| frames.contains(&o.0)) {
                continue;
            }
            let views: Vec<(Pose, Vector2<f64>)> = t
                .observations
                .iter()
                .filter_map(|(f, p)| self.poses.get(f).map(|pose| (*pose, *p)))
                .collect();
            if views.len() < 2 {
                continue;
            }
            let Some(x) = triangulate(&views, &self.camera) else { continue };
            let centers: Vec<Vector3<f64>> = views.iter().map(|(p, _)| *p.center()).collect();
            if max_parallax(&x, &centers) < min_angle || max_reprojection_error(&x, &views, &self.camera) > cutoff {
                continue;
            }
            t.position = Some(x);
            t.triangulated_with = views.len();
            created.push(*tid);
        }
        created
    }

    /// Bundle adjustment over `free` frames and the points they observe; any
    /// other posed frame observing those points contributes with a frozen pose. With `fix_first`, the first free
    /// frame is held fixed. Returns the final RMS.
    fn adjust(&mut self, free: &[u64], fix_first: bool) -> Result<f64, PoseError> {
        for pass in 0..2 {
            let mut problem = BundleProblem::default();
            let mut cam_index: BTreeMap<u64, usize> = BTreeMap::new();
            for (k, f) in free.iter().enumerate() {
                let fixed = fix_first && k == 0;
                cam_index.insert(*f, problem.add_pose(self.poses[f], fixed));
            }
            let mut point_ids = Vec::new();
            let mut tids: Vec<u64> = self
                .tracks
                .iter()
                .filter(|(_, t)| t.position.is_some() && t.observations.iter().any(|o| free.contains(&o.0)))
                .map(|(id, _)| *id)
                .collect();
            tids.sort_unstable();
            for tid in tids {
                let t = &self.tracks[&tid];
                let pi = problem.add_point(t.position.expect("filtered"), false);
                point_ids.push(tid);
                for (f, px) in &t.observations {
                    let ci = match cam_index.get(f) {
                        Some(c) => *c,
                        None => match self.poses.get(f) {
                            Some(p) => {
                                let c = problem.add_pose(*p, true);
                                cam_index.insert(*f, c);
                                c
                            }
                            None => continue,
                        },
                    };
                    problem.observe(ci, pi, *px);
                }
            }
            if problem.observations.is_empty() {
                return Ok(0.0);
            }
            bundle_adjust(&mut problem, &self.camera, &self.config.bundle)?;
            let removed = problem.remove_outliers(&self.camera, self.config.bundle.outlier_threshold);
            // Write back.
            for (f, c) in &cam_index {
                if !problem.pose_fixed[*c] {
                    self.poses.insert(*f, problem.poses[*c]);
                }
            }
            for (k, tid) in point_ids.iter().enumerate() {
                if let Some(t) = self.tracks.get_mut(tid) {
                    t.position = Some(problem.points[k]);
                }
            }
            let frame_of: BTreeMap<usize, u64> = cam_index.iter().map(|(f, c)| (*c, *f)).collect();
            for o in &removed {
                let tid = point_ids[o.point];
                let f = frame_of[&o.camera];
                if let Some(t) = self.tracks.get_mut(&tid) {
                    t.observations.retain(|ob| ob.0 != f);
                    if t.observations.len() < 2 {
                        t.position = None;
                    }
                }
            }
            if removed.is_empty() || pass == 1 {
                return Ok(problem.rms(&self.camera));
            }
        }
        unreachable!()
    }

    /// Registers a frame against the map and refines the window.
    fn register(&mut self, id: u64) -> Result<(Vec<(u64, Pose)>, Vec<u64>, f64), PoseError> {
        let pose = self.resect_frame(id)?;
        // Drop this frame's observations that disagree with the pose.
        let cutoff = self.config.resection.threshold;
        for t in self.tracks.values_mut() {
            if let (Some(x), Some(pos)) = (t.position, t.observations.iter().position(|o| o.0 == id)) {
                let ok = super::bundle::project_ideal(&pose, &x, &self.camera)
                    .is_some_and(|p| (p - t.observations[pos].1).norm() <= cutoff);
                if !ok {
                    t.observations.remove(pos);
                }
            }
        }
        self.poses.insert(id, pose);
        self.window.push(id);
        let members = self.window.members.clone();
        let mut touched = self.triangulate_new(&members);
        let rms = self.adjust(&members, false)?;
        self.window.fixed = self.fixed_frames(&members);
        touched.extend(
            self.tracks
                .iter()
                .filter(|(_, t)| t.position.is_some() && t.observations.iter().any(|o| members.contains(&o.0)))
                .map(|(id, _)| *id),
        );
        let refined = members.iter().map(|f| (*f, self.poses[f])).collect();
        Ok((refined, touched, rms))
    }

    fn fixed_frames(&self, members: &[u64]) -> Vec<u64> {
        let mut fixed: Vec<u64> = self
            .tracks
            .values()
            .filter(|t| t.position.is_some() && t.observations.iter().any(|o| members.contains(&o.0)))
            .flat_map(|t| t.observations.iter().map(|o| o.0))
            .filter(|f| !members.contains(f) && self.poses.contains_key(f))
            .collect();
        fixed.sort_unstable();
        fixed.dedup();
        fixed
    }

    fn process_replay(
        &mut self,
        id: u64,
        timestamp: f64,
        gray: GrayImage,
        features: FeatureSet,
        image: &RgbImage,
        link: Result<Vec<Option<u64>>, PoseError>,
    ) -> Result<FrameUpdate, PoseError> {
        let PoseSource::Replay(provider) = &self.source else { unreachable!() };
        let pose = match provider.pose(id) {
            Ok(p) => p,
            Err(e) => return Err(self.lost(id, e)),
        };
        let corner_track = link.unwrap_or_else(|e| {
            if self.previous.is_some() {
                log::debug!("frame {id}: no tie points ({e})");
            }
            vec![None; features.len()]
        });
        self.previous = Some(PreviousFrame {
            id,
            gray,
            features,
            corner_track,
            rgb: image.clone(),
        });
        self.poses.insert(id, pose);
        self.phase = Phase::Tracking;
        self.window.push(id);
        let members = self.window.members.clone();
        let mut touched = self.triangulate_new(&members);
        touched.extend(self.retriangulate(id));
        self.window.fixed = self.fixed_frames(&members);
        Ok(self.finish_update(id, timestamp, vec![(id, pose)], touched, None))
    }

    /// Re-estimates points that gained an observation in `frame` from all of
    /// their (exactly posed) views.
    fn retriangulate(&mut self, frame: u64) -> Vec<u64> {
        let cutoff = self.config.bundle.outlier_threshold;
        let mut out = Vec::new();
        for (tid, t) in self.tracks.iter_mut() {
            if t.position.is_none() || t.observations.len() <= t.triangulated_with {
                continue;
            }
            if t.observations.last().map(|o| o.0) != Some(frame) {
                continue;
            }
            let views: Vec<(Pose, Vector2<f64>)> = t
                .observations
                .iter()
                .filter_map(|(f, p)| self.poses.get(f).map(|pose| (*pose, *p)))
                .collect();
            match triangulate(&views, &self.camera) {
                Some(x) if max_reprojection_error(&x, &views, &self.camera) <= cutoff => {
                    t.position = Some(x);
                    t.triangulated_with = views.len();
                    out.push(*tid);
                }
                _ => {
                    // The newest observation is inconsistent: end the track there.
                    t.observations.pop();
                    t.last_frame = t.observations.last().map_or(0, |o| o.0);
                }
            }
        }
        out
    }
}
