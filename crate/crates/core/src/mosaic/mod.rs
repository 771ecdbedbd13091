//! Incremental 2D mosaicing: keyframes are rectified onto the local plane
//! through the plane-induced homography and stitched into per-segment
//! canvases. A new segment starts whenever the plane changes too much.
//!
//! Every segment owns a pixel lattice in plane coordinates: lattice pixel
//! `(col, row)` has its center at `(a, b) = (col * gsd, -row * gsd)`. Tiles
//! are sampled on the same lattice, so compositing is a pure copy.

pub mod world_file;

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage, RgbImage};
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::camera::unproject;
use crate::raster::{sample_bilinear, to_rgb8};
use crate::{CameraModel, PixelCoord, Plane, PlaneFitReport, Pose};

pub use world_file::WorldFile;

#[derive(Debug, Error)]
pub enum MosaicError {
    #[error("camera center lies on the projection plane")]
    CameraOnPlane,
    #[error("no points to anchor the plane frame")]
    EmptyCloud,
    #[error("image footprint on the plane is empty or unbounded")]
    EmptyFootprint,
    #[error("tile of {width}x{height} pixels exceeds the {limit} pixel side limit")]
    TileTooLarge { width: i64, height: i64, limit: u32 },
    #[error("canvas would grow to {width}x{height} pixels (side limit {limit})")]
    CanvasLimit { width: i64, height: i64, limit: u32 },
    #[error("invalid mosaic configuration: {0}")]
    Config(String),
    #[error("world file: {0}")]
    WorldFile(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image encoding error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MosaicError + '_ {
    move |source| MosaicError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Orthonormal 2D coordinate system on a plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFrame {
    pub origin: Vector3<f64>,
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl PlaneFrame {
    pub fn plane(&self) -> Plane {
        Plane::through_point(self.normal, &self.origin)
    }

    pub fn to_plane_coords(&self, point: &Vector3<f64>) -> (f64, f64) {
        let d = point - self.origin;
        (d.dot(&self.u_axis), d.dot(&self.v_axis))
    }

    pub fn to_world(&self, a: f64, b: f64) -> Vector3<f64> {
        self.origin + self.u_axis * a + self.v_axis * b
    }
}

/// Frame anchored at the inlier centroid (projected onto the plane), with
/// `u` along the in-plane component of `hint`.
pub fn build_plane_frame(plane: &Plane, points: &[Vector3<f64>], hint: &Vector3<f64>) -> Result<PlaneFrame, MosaicError> {
    if points.is_empty() {
        return Err(MosaicError::EmptyCloud);
    }
    let n = *plane.normal();
    let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let origin = plane.project_point(&centroid);
    let near_normal = |h: &Vector3<f64>| h.norm() == 0.0 || h.normalize().dot(&n).abs() > 5f64.to_radians().cos();
    let axis = [*hint, Vector3::y(), Vector3::x()]
        .into_iter()
        .find(|h| !near_normal(h))
        .expect("world axes cannot both be parallel to a unit normal");
    let u = (axis - n * axis.dot(&n)).normalize();
    let v = n.cross(&u);
    Ok(PlaneFrame {
        origin,
        u_axis: u,
        v_axis: v,
        normal: n,
    })
}

/// Map from plane coordinates `(a, b, 1)` to homogeneous undistorted pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub h: Matrix3<f64>,
}

impl Homography {
    /// Scales `h` so that `h[(2, 2)] = 1` when that entry is not negligible.
    pub fn new(h: Matrix3<f64>) -> Self {
        let s = h[(2, 2)];
        Self {
            h: if s.abs() > 1e-12 { h / s } else { h },
        }
    }

    pub fn apply(&self, a: f64, b: f64) -> Option<PixelCoord> {
        let p = self.h * Vector3::new(a, b, 1.0);
        (p.z.abs() > 1e-15).then(|| PixelCoord::new(p.x / p.z, p.y / p.z))
    }

    pub fn inverse(&self) -> Option<Self> {
        self.h.try_inverse().map(Self::new)
    }
}

/// `K [R^T u | R^T v | R^T (origin - center)]`, unnormalized: the third
/// output component is the depth of the plane point.
fn plane_to_image_matrix(pose: &Pose, camera: &CameraModel, frame: &PlaneFrame) -> Result<Matrix3<f64>, MosaicError> {
    if frame.plane().signed_distance(pose.center()).abs() <= 1e-9 {
        return Err(MosaicError::CameraOnPlane);
    }
    let rt = pose.rotation().transpose();
    let m = Matrix3::from_columns(&[
        rt * frame.u_axis,
        rt * frame.v_axis,
        rt * (frame.origin - pose.center()),
    ]);
    Ok(camera.intrinsic_matrix() * m)
}

pub fn plane_to_image_homography(pose: &Pose, camera: &CameraModel, frame: &PlaneFrame) -> Result<Homography, MosaicError> {
    plane_to_image_matrix(pose, camera, frame).map(Homography::new)
}

/// Rectified image on a segment lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub frame_id: u64,
    /// RGB with alpha 255 where the source image supports the pixel.
    pub image: RgbaImage,
    /// Lattice index of the top-left pixel.
    pub col0: i64,
    pub row0: i64,
    pub gsd: f64,
}

impl Tile {
    pub fn world_file(&self) -> WorldFile {
        WorldFile::axis_aligned(self.gsd, self.col0 as f64 * self.gsd, -(self.row0 as f64) * self.gsd)
    }

    /// Writes `<stem>.png` and `<stem>.pgw` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), MosaicError> {
        write_raster_with_world_file(&self.image, &self.world_file(), dir, stem)
    }
}

fn write_raster_with_world_file(image: &RgbaImage, wf: &WorldFile, dir: &Path, stem: &str) -> Result<(), MosaicError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let png = dir.join(format!("{stem}.png"));
    image.save(&png).map_err(|e| MosaicError::Image {
        path: png.clone(),
        message: e.to_string(),
    })?;
    let pgw = dir.join(format!("{stem}.pgw"));
    fs::write(&pgw, wf.to_text()).map_err(io_err(&pgw))
}

/// Resamples `image` onto the lattice of `frame` at `gsd`: each lattice pixel
/// is mapped to an undistorted pixel, re-distorted and sampled bilinearly.
pub fn rectify_image(
    frame_id: u64,
    image: &RgbImage,
    pose: &Pose,
    camera: &CameraModel,
    frame: &PlaneFrame,
    gsd: f64,
    max_side: u32,
) -> Result<Tile, MosaicError> {
    if !(gsd > 0.0) {
        return Err(MosaicError::Config(format!("gsd must be positive, got {gsd}")));
    }
    let m = plane_to_image_matrix(pose, camera, frame)?;
    let minv = m.try_inverse().ok_or(MosaicError::EmptyFootprint)?;
    let (w, h) = (f64::from(camera.width), f64::from(camera.height));
    const STEPS: usize = 16;
    let mut bounds = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for k in 0..STEPS {
        let s = k as f64 / STEPS as f64;
        for (u, v) in [
            (s * (w - 1.0), 0.0),
            (w - 1.0, s * (h - 1.0)),
            ((1.0 - s) * (w - 1.0), h - 1.0),
            (0.0, (1.0 - s) * (h - 1.0)),
        ] {
            let p = crate::camera::undistort_pixel(PixelCoord::new(u, v), camera).map_err(|_| MosaicError::EmptyFootprint)?;
            let q = minv * Vector3::new(p.u, p.v, 1.0);
            // Third component is the inverse depth along the ray.
            if !(q.z > 1e-12) {
                return Err(MosaicError::EmptyFootprint);
            }
            let (a, b) = (q.x / q.z, q.y / q.z);
            bounds = [bounds[0].min(a), bounds[1].max(a), bounds[2].min(b), bounds[3].max(b)];
        }
    }
    let eps = 1e-9;
    let col0 = (bounds[0] / gsd - eps).ceil();
    let col1 = (bounds[1] / gsd + eps).floor();
    let row0 = (-bounds[3] / gsd - eps).ceil();
    let row1 = (-bounds[2] / gsd + eps).floor();
    if !(col0.is_finite() && col1.is_finite() && row0.is_finite() && row1.is_finite()) || col1 < col0 || row1 < row0 {
        return Err(MosaicError::EmptyFootprint);
    }
    let (width, height) = ((col1 - col0) as i64 + 1, (row1 - row0) as i64 + 1);
    if width > i64::from(max_side) || height > i64::from(max_side) {
        return Err(MosaicError::TileTooLarge {
            width,
            height,
            limit: max_side,
        });
    }
    let (col0, row0) = (col0 as i64, row0 as i64);
    let margin_u = 0.5 * w;
    let margin_v = 0.5 * h;
    let tile = RgbaImage::from_fn(width as u32, height as u32, |i, j| {
        let a = (col0 + i64::from(i)) as f64 * gsd;
        let b = -((row0 + i64::from(j)) as f64) * gsd;
        let p = m * Vector3::new(a, b, 1.0);
        if !(p.z > 0.0) {
            return Rgba([0, 0, 0, 0]);
        }
        let (u, v) = (p.x / p.z, p.y / p.z);
        // Far outside the sensor the distortion polynomial is meaningless.
        if u < -margin_u || u > w + margin_u || v < -margin_v || v > h + margin_v {
            return Rgba([0, 0, 0, 0]);
        }
        let raw = camera.distort_pixel(PixelCoord::new(u, v));
        match sample_bilinear(image, raw) {
            Some(c) => {
                let [r, g, b] = to_rgb8(c);
                Rgba([r, g, b, 255])
            }
            None => Rgba([0, 0, 0, 0]),
        }
    });
    Ok(Tile {
        frame_id,
        image: tile,
        col0,
        row0,
        gsd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendMode {
    #[default]
    LastWriteWins,
    /// Weighted average by distance to the edge of each tile's support.
    Feather,
}

impl std::str::FromStr for BlendMode {
    type Err = MosaicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "last_write_wins" | "last" => Ok(Self::LastWriteWins),
            "feather" => Ok(Self::Feather),
            other => Err(MosaicError::Config(format!("unknown blend mode {other:?}"))),
        }
    }
}

/// Chamfer (3-4) distance of each valid pixel to the nearest invalid pixel or
/// to the outside, in pixels (border pixels get 1).
fn edge_distance(tile: &RgbaImage) -> Vec<f32> {
    let (w, h) = (tile.width() as usize, tile.height() as usize);
    let inf = f32::MAX / 4.0;
    let mut d: Vec<f32> = tile.pixels().map(|p| if p[3] > 0 { inf } else { 0.0 }).collect();
    let at = |d: &Vec<f32>, x: isize, y: isize| -> f32 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let k = y as usize * w + x as usize;
            if d[k] == 0.0 {
                continue;
            }
            let best = (at(&d, x - 1, y) + 3.0)
                .min(at(&d, x, y - 1) + 3.0)
                .min(at(&d, x - 1, y - 1) + 4.0)
                .min(at(&d, x + 1, y - 1) + 4.0);
            d[k] = d[k].min(best);
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let k = y as usize * w + x as usize;
            if d[k] == 0.0 {
                continue;
            }
            let best = (at(&d, x + 1, y) + 3.0)
                .min(at(&d, x, y + 1) + 3.0)
                .min(at(&d, x + 1, y + 1) + 4.0)
                .min(at(&d, x - 1, y + 1) + 4.0);
            d[k] = d[k].min(best);
        }
    }
    d.iter_mut().for_each(|v| *v /= 3.0);
    d
}

/// One mosaic canvas over a fixed plane.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicSegment {
    pub id: u64,
    pub plane: Plane,
    pub frame: PlaneFrame,
    pub gsd: f64,
    /// Alpha marks valid pixels.
    pub canvas: RgbaImage,
    /// Lattice index of the canvas top-left pixel.
    pub col0: i64,
    pub row0: i64,
    pub frames: Vec<u64>,
    blend: BlendMode,
    max_side: u32,
    weights: Vec<f32>,
}

impl MosaicSegment {
    pub fn new(id: u64, frame: PlaneFrame, gsd: f64, blend: BlendMode, max_side: u32) -> Self {
        Self {
            id,
            plane: frame.plane(),
            frame,
            gsd,
            canvas: RgbaImage::new(0, 0),
            col0: 0,
            row0: 0,
            frames: Vec::new(),
            blend,
            max_side,
            weights: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.canvas.width() == 0
    }

    /// Plane coordinates of the top-left pixel center.
    pub fn canvas_origin(&self) -> (f64, f64) {
        (self.col0 as f64 * self.gsd, -(self.row0 as f64) * self.gsd)
    }

    pub fn world_file(&self) -> WorldFile {
        let (a0, b0) = self.canvas_origin();
        WorldFile::axis_aligned(self.gsd, a0, b0)
    }

    /// Canvas pixel (column, row) of plane coordinates.
    pub fn plane_to_pixel(&self, a: f64, b: f64) -> (f64, f64) {
        (a / self.gsd - self.col0 as f64, -b / self.gsd - self.row0 as f64)
    }

    /// Grows the canvas to cover `tile` and blends it in.
    pub fn composite(&mut self, tile: &Tile) -> Result<(), MosaicError> {
        if (tile.gsd - self.gsd).abs() > 1e-12 * self.gsd {
            return Err(MosaicError::Config("tile and segment resolutions differ".into()));
        }
        let (tw, th) = (i64::from(tile.image.width()), i64::from(tile.image.height()));
        let (c0, r0, c1, r1) = if self.is_empty() {
            (tile.col0, tile.row0, tile.col0 + tw, tile.row0 + th)
        } else {
            (
                self.col0.min(tile.col0),
                self.row0.min(tile.row0),
                (self.col0 + i64::from(self.canvas.width())).max(tile.col0 + tw),
                (self.row0 + i64::from(self.canvas.height())).max(tile.row0 + th),
            )
        };
        let (nw, nh) = (c1 - c0, r1 - r0);
        if nw > i64::from(self.max_side) || nh > i64::from(self.max_side) {
            return Err(MosaicError::CanvasLimit {
                width: nw,
                height: nh,
                limit: self.max_side,
            });
        }
        if self.is_empty() || (c0, r0, nw, nh) != (self.col0, self.row0, i64::from(self.canvas.width()), i64::from(self.canvas.height())) {
            self.grow(c0, r0, nw as u32, nh as u32);
        }
        let dx = (tile.col0 - self.col0) as u32;
        let dy = (tile.row0 - self.row0) as u32;
        let cw = self.canvas.width() as usize;
        let tile_w = tile.image.width() as usize;
        let distances = matches!(self.blend, BlendMode::Feather).then(|| edge_distance(&tile.image));
        for (i, j, px) in tile.image.enumerate_pixels() {
            if px[3] == 0 {
                continue;
            }
            let (x, y) = (i + dx, j + dy);
            match &distances {
                None => self.canvas.put_pixel(x, y, *px),
                Some(dist) => {
                    let wt = dist[j as usize * tile_w + i as usize];
                    let k = y as usize * cw + x as usize;
                    let w0 = self.weights[k];
                    let old = *self.canvas.get_pixel(x, y);
                    let total = w0 + wt;
                    let mix = |o: u8, n: u8| ((f32::from(o) * w0 + f32::from(n) * wt) / total).round().clamp(0.0, 255.0) as u8;
                    self.canvas
                        .put_pixel(x, y, Rgba([mix(old[0], px[0]), mix(old[1], px[1]), mix(old[2], px[2]), 255]));
                    self.weights[k] = total;
                }
            }
        }
        self.frames.push(tile.frame_id);
        Ok(())
    }

    fn grow(&mut self, c0: i64, r0: i64, w: u32, h: u32) {
        let mut canvas = RgbaImage::new(w, h);
        let feather = matches!(self.blend, BlendMode::Feather);
        let mut weights = if feather { vec![0.0; w as usize * h as usize] } else { Vec::new() };
        if !self.is_empty() {
            let dx = (self.col0 - c0) as u32;
            let dy = (self.row0 - r0) as u32;
            let ow = self.canvas.width() as usize;
            for (i, j, px) in self.canvas.enumerate_pixels() {
                canvas.put_pixel(i + dx, j + dy, *px);
                if feather {
                    weights[(j + dy) as usize * w as usize + (i + dx) as usize] = self.weights[j as usize * ow + i as usize];
                }
            }
        }
        self.canvas = canvas;
        self.weights = weights;
        self.col0 = c0;
        self.row0 = r0;
    }

    /// Key = value record of the segment datum.
    pub fn manifest_text(&self) -> String {
        let n = self.plane.normal();
        let (a0, b0) = self.canvas_origin();
        let o = self.frame.origin;
        let (u, v) = (self.frame.u_axis, self.frame.v_axis);
        let frames: Vec<String> = self.frames.iter().map(u64::to_string).collect();
        format!(
            "segment = {}\nplane = {:?} {:?} {:?} {:?}\norigin = {:?} {:?} {:?}\nu_axis = {:?} {:?} {:?}\nv_axis = {:?} {:?} {:?}\ngsd = {:?}\nwidth = {}\nheight = {}\ncanvas_origin = {:?} {:?}\nframes = {}\n",
            self.id,
            n.x,
            n.y,
            n.z,
            self.plane.offset(),
            o.x,
            o.y,
            o.z,
            u.x,
            u.y,
            u.z,
            v.x,
            v.y,
            v.z,
            self.gsd,
            self.canvas.width(),
            self.canvas.height(),
            a0,
            b0,
            frames.join(" ")
        )
    }

    /// Writes `segment_<id>.png`, `.pgw` and `.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), MosaicError> {
        if self.is_empty() {
            return Ok(());
        }
        let stem = format!("segment_{:03}", self.id);
        write_raster_with_world_file(&self.canvas, &self.world_file(), dir, &stem)?;
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.manifest_text()).map_err(io_err(&txt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinitConfig {
    pub max_normal_change_deg: f64,
    /// Maximum fit RMS as a fraction of the scene scale.
    pub rel_residual_max: f64,
    /// Maximum offset jump as a fraction of the scene scale.
    pub max_offset_change: f64,
}

impl Default for ReinitConfig {
    fn default() -> Self {
        Self {
            max_normal_change_deg: 10.0,
            rel_residual_max: 0.05,
            max_offset_change: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinitDecision {
    Continue,
    Reinitialize,
}

/// Compares a new fit with the current segment plane. The offset change is
/// measured along the new normal at `reference` (the new inlier centroid).
pub fn segment_reinit_check(
    current: &Plane,
    new_plane: &Plane,
    report: &PlaneFitReport,
    reference: &Vector3<f64>,
    scene_scale: f64,
    config: &ReinitConfig,
) -> ReinitDecision {
    let angle = current.angle_to(new_plane).to_degrees();
    let n = new_plane.normal();
    let projected = n.dot(&current.project_point(reference));
    let offset_jump = (new_plane.offset() - projected).abs();
    if angle > config.max_normal_change_deg
        || report.rms_residual > config.rel_residual_max * scene_scale
        || offset_jump > config.max_offset_change * scene_scale
    {
        ReinitDecision::Reinitialize
    } else {
        ReinitDecision::Continue
    }
}

/// Median ground footprint of the central pixel over `poses`.
pub fn default_gsd(poses: &[Pose], camera: &CameraModel, plane: &Plane) -> Option<f64> {
    let mut values: Vec<f64> = poses
        .iter()
        .filter_map(|pose| {
            let hit = |du: f64, dv: f64| {
                let ray = unproject(PixelCoord::new(camera.cx + du, camera.cy + dv), pose, camera);
                plane.intersect_ray(&ray, 0.0)
            };
            let c = hit(0.0, 0.0)?;
            let x = hit(1.0, 0.0)?;
            let y = hit(0.0, 1.0)?;
            Some(0.5 * ((x - c).norm() + (y - c).norm()))
        })
        .collect();
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values[values.len() / 2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosaicConfig {
    pub blend: BlendMode,
    /// Fixed resolution; `None` derives it per segment from the first window.
    pub gsd: Option<f64>,
    pub max_canvas_side: u32,
    pub reinit: ReinitConfig,
}

impl Default for MosaicConfig {
    fn default() -> Self {
        Self {
            blend: BlendMode::LastWriteWins,
            gsd: None,
            max_canvas_side: 16384,
            reinit: ReinitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseReason {
    PlaneChange,
    CanvasLimit,
    Restart,
    EndOfRun,
}

impl CloseReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PlaneChange => "plane_change",
            Self::CanvasLimit => "canvas_limit",
            Self::Restart => "restart",
            Self::EndOfRun => "end_of_run",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MosaicEvent {
    SegmentStarted { segment_id: u64, plane: Plane, gsd: f64 },
    TileAdded { segment_id: u64, frame_id: u64, width: u32, height: u32 },
    SegmentClosed { segment_id: u64, frames: usize, reason: CloseReason },
}

/// Keyframe accepted for projection with its local plane fit.
#[derive(Debug, Clone, Copy)]
pub struct MosaicFrame<'a> {
    pub frame_id: u64,
    pub image: &'a RgbImage,
    pub pose: &'a Pose,
    pub camera: &'a CameraModel,
    /// Fitted plane oriented toward the cameras.
    pub plane: &'a Plane,
    pub report: &'a PlaneFitReport,
    pub inliers: &'a [Vector3<f64>],
    pub scene_scale: f64,
    pub window_poses: &'a [Pose],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosaicStep {
    pub segment_id: u64,
    pub tile: Option<Tile>,
    pub events: Vec<MosaicEvent>,
}

/// Owns the open segment and the list of completed ones.
#[derive(Debug)]
pub struct Mosaicker {
    config: MosaicConfig,
    current: Option<MosaicSegment>,
    completed: Vec<MosaicSegment>,
    next_id: u64,
}

impl Mosaicker {
    pub fn new(config: MosaicConfig) -> Result<Self, MosaicError> {
        if config.gsd.is_some_and(|g| !(g > 0.0)) {
            return Err(MosaicError::Config("gsd must be positive".into()));
        }
        if config.max_canvas_side == 0 {
            return Err(MosaicError::Config("canvas side limit must be positive".into()));
        }
        Ok(Self {
            config,
            current: None,
            completed: Vec::new(),
            next_id: 0,
        })
    }

    pub fn current(&self) -> Option<&MosaicSegment> {
        self.current.as_ref()
    }

    pub fn completed(&self) -> &[MosaicSegment] {
        &self.completed
    }

    /// Removes and returns the completed segments.
    pub fn take_completed(&mut self) -> Vec<MosaicSegment> {
        std::mem::take(&mut self.completed)
    }

    /// Total number of segments started so far.
    pub fn segment_count(&self) -> u64 {
        self.next_id
    }

    /// Closes the open segment, if any.
    pub fn close_current(&mut self, reason: CloseReason) -> Option<MosaicEvent> {
        let seg = self.current.take()?;
        let event = MosaicEvent::SegmentClosed {
            segment_id: seg.id,
            frames: seg.frames.len(),
            reason,
        };
        self.completed.push(seg);
        Some(event)
    }

    /// Closes everything and returns all completed segments.
    pub fn finish(mut self) -> (Vec<MosaicSegment>, Option<MosaicEvent>) {
        let event = self.close_current(CloseReason::EndOfRun);
        (self.completed, event)
    }

    fn start_segment(&mut self, f: &MosaicFrame) -> Result<MosaicEvent, MosaicError> {
        let hint = f.pose.rotation().column(0).into_owned();
        let frame = build_plane_frame(f.plane, f.inliers, &hint)?;
        let plane = frame.plane();
        let gsd = match self.config.gsd {
            Some(g) => g,
            None => {
                let poses: Vec<Pose> = if f.window_poses.is_empty() {
                    vec![*f.pose]
                } else {
                    f.window_poses.to_vec()
                };
                default_gsd(&poses, f.camera, &plane).ok_or(MosaicError::EmptyFootprint)?
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        self.current = Some(MosaicSegment::new(id, frame, gsd, self.config.blend, self.config.max_canvas_side));
        Ok(MosaicEvent::SegmentStarted {
            segment_id: id,
            plane,
            gsd,
        })
    }

    /// Adds one accepted keyframe, re-initializing the segment when needed.
    pub fn submit(&mut self, f: &MosaicFrame) -> Result<MosaicStep, MosaicError> {
        let mut events = Vec::new();
        if let Some(seg) = &self.current {
            let reference = if f.inliers.is_empty() {
                f.plane.project_point(f.pose.center())
            } else {
                f.inliers.iter().sum::<Vector3<f64>>() / f.inliers.len() as f64
            };
            let decision = segment_reinit_check(&seg.plane, f.plane, f.report, &reference, f.scene_scale, &self.config.reinit);
            if decision == ReinitDecision::Reinitialize {
                events.extend(self.close_current(CloseReason::PlaneChange));
            }
        }
        if self.current.is_none() {
            events.push(self.start_segment(f)?);
        }
        let tile = {
            let seg = self.current.as_ref().expect("segment open");
            rectify_image(f.frame_id, f.image, f.pose, f.camera, &seg.frame, seg.gsd, self.config.max_canvas_side)
        };
        let tile = match tile {
            Ok(t) => t,
            Err(e @ (MosaicError::EmptyFootprint | MosaicError::TileTooLarge { .. } | MosaicError::CameraOnPlane)) => {
                log::warn!("frame {}: tile skipped: {e}", f.frame_id);
                let segment_id = self.current.as_ref().expect("segment open").id;
                return Ok(MosaicStep {
                    segment_id,
                    tile: None,
                    events,
                });
            }
            Err(e) => return Err(e),
        };
        let seg = self.current.as_mut().expect("segment open");
        let tile = match seg.composite(&tile) {
            Ok(()) => tile,
            Err(MosaicError::CanvasLimit { .. }) => {
                events.extend(self.close_current(CloseReason::CanvasLimit));
                events.push(self.start_segment(f)?);
                let seg = self.current.as_mut().expect("segment open");
                let tile = rectify_image(f.frame_id, f.image, f.pose, f.camera, &seg.frame, seg.gsd, self.config.max_canvas_side)?;
                seg.composite(&tile)?;
                tile
            }
            Err(e) => return Err(e),
        };
        let segment_id = self.current.as_ref().expect("segment open").id;
        events.push(MosaicEvent::TileAdded {
            segment_id,
            frame_id: f.frame_id,
            width: tile.image.width(),
            height: tile.image.height(),
        });
        Ok(MosaicStep {
            segment_id,
            tile: Some(tile),
            events,
        })
    }
}
