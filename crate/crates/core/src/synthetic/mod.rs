//! Ground-truth scene generator: ray-cast renders of procedurally textured
//! terrains along known trajectories.
//!
//! World frame: the survey corridor runs along `+x` from `x = 0`, centered on
//! `y = 0`, with `+z` up. Terrain heights are measured from `z = 0`.

pub mod texture;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{nadir_rotation, undistort_pixel};
use crate::keyvalue::{KeyValueError, KeyValues};
use crate::pose_engine::replay::{format_ahrs, format_trajectory, AhrsSample, TrajectoryRecord};
use crate::{CameraModel, PixelCoord, Plane, Pose};

pub use texture::{classify_marker_hue, Marker, TextureField, TextureSpec, MARKER_HUES};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Config(#[from] KeyValueError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Terrain {
    /// Horizontal plane `z = height`.
    Flat { height: f64 },
    /// `z = 0` for `x < position`, `z = height` beyond, joined by a vertical
    /// wall.
    TwoLevel { height: f64, position: f64 },
    /// `z = tan(angle) * x`, rising along the corridor.
    Inclined { angle_degrees: f64 },
}

/// Surface hit by a ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Surface {
    Ground,
    Wall,
}

impl Terrain {
    pub fn height_at(&self, x: f64) -> f64 {
        match *self {
            Terrain::Flat { height } => height,
            Terrain::TwoLevel { height, position } => {
                if x < position {
                    0.0
                } else {
                    height
                }
            }
            Terrain::Inclined { angle_degrees } => angle_degrees.to_radians().tan() * x,
        }
    }

    /// Planar pieces of the terrain (walls excluded), each with the `x`
    /// range it covers.
    pub fn planes(&self) -> Vec<(Plane, [f64; 2])> {
        let up = Vector3::z();
        match *self {
            Terrain::Flat { height } => {
                vec![(Plane::new(up, height), [f64::NEG_INFINITY, f64::INFINITY])]
            }
            Terrain::TwoLevel { height, position } => vec![
                (Plane::new(up, 0.0), [f64::NEG_INFINITY, position]),
                (Plane::new(up, height), [position, f64::INFINITY]),
            ],
            Terrain::Inclined { angle_degrees } => {
                let a = angle_degrees.to_radians();
                let n = Vector3::new(-a.sin(), 0.0, a.cos());
                vec![(Plane::new(n, 0.0), [f64::NEG_INFINITY, f64::INFINITY])]
            }
        }
    }

    pub fn plane_at(&self, x: f64) -> Plane {
        self.planes()
            .into_iter()
            .find(|(_, r)| x >= r[0] && x < r[1])
            .map(|(p, _)| p)
            .expect("terrain pieces cover the real line")
    }

    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Surface)> {
        let horizontal = |h: f64| -> Option<f64> {
            if dir.z.abs() < 1e-15 {
                return None;
            }
            let t = (h - origin.z) / dir.z;
            (t > 0.0).then_some(t)
        };
        match *self {
            Terrain::Flat { height } => horizontal(height).map(|t| (t, Surface::Ground)),
            Terrain::TwoLevel { height, position } => {
                let mut best: Option<(f64, Surface)> = None;
                let mut consider = |t: f64, s: Surface| {
                    if best.is_none_or(|(b, _)| t < b) {
                        best = Some((t, s));
                    }
                };
                if let Some(t) = horizontal(height) {
                    if origin.x + t * dir.x >= position {
                        consider(t, Surface::Ground);
                    }
                }
                if let Some(t) = horizontal(0.0) {
                    if origin.x + t * dir.x < position {
                        consider(t, Surface::Ground);
                    }
                }
                if dir.x.abs() > 1e-15 {
                    let t = (position - origin.x) / dir.x;
                    let z = origin.z + t * dir.z;
                    if t > 0.0 && (0.0..=height).contains(&z) {
                        consider(t, Surface::Wall);
                    }
                }
                best
            }
            Terrain::Inclined { angle_degrees } => {
                let a = angle_degrees.to_radians();
                let n = Vector3::new(-a.sin(), 0.0, a.cos());
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = -n.dot(origin) / denom;
                (t > 0.0).then_some((t, Surface::Ground))
            }
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        match *self {
            Terrain::Flat { height } if !height.is_finite() => {
                Err(SynthError::InvalidSpec("flat height must be finite".into()))
            }
            Terrain::TwoLevel { height, position } if !(height >= 0.0) || !position.is_finite() => {
                Err(SynthError::InvalidSpec("step height must be >= 0".into()))
            }
            Terrain::Inclined { angle_degrees } if !(angle_degrees.abs() < 60.0) => {
                Err(SynthError::InvalidSpec("incline must be within 60 degrees".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub terrain: Terrain,
    pub texture: TextureSpec,
    /// Corridor length (along `x`) and width (along `y`), meters.
    pub extent: [f64; 2],
    pub marker_spacing: f64,
    pub marker_radius: f64,
    pub marker_offset: f64,
}

impl SceneSpec {
    /// Flat 30 m x 1.2 m pool floor.
    pub fn comex() -> Self {
        Self {
            terrain: Terrain::Flat { height: 0.0 },
            texture: TextureSpec::default(),
            extent: [30.0, 1.2],
            marker_spacing: 2.5,
            marker_radius: 0.04,
            marker_offset: 0.25,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.terrain.validate()?;
        if !(self.extent[0] >= 0.0 && self.extent[1] > 0.0)
            || !self.extent.iter().all(|e| e.is_finite())
        {
            return Err(SynthError::InvalidSpec("extent must be positive".into()));
        }
        if !(self.marker_spacing > 0.0 && self.marker_radius > 0.0) {
            return Err(SynthError::InvalidSpec(
                "marker spacing and radius must be positive".into(),
            ));
        }
        if !(self.texture.blob_density > 0.0) {
            return Err(SynthError::InvalidSpec("blob density must be positive".into()));
        }
        Ok(())
    }

    /// Markers every `marker_spacing` along the corridor, starting half a
    /// spacing in, alternating sides of the center line.
    pub fn markers(&self) -> Vec<Marker> {
        let offset = self
            .marker_offset
            .min(self.extent[1] / 2.0 - self.marker_radius)
            .max(0.0);
        let mut out = Vec::new();
        let mut x = self.marker_spacing / 2.0;
        while x <= self.extent[0] + 1e-9 {
            let id = out.len();
            let y = if id % 2 == 0 { offset } else { -offset };
            if let Terrain::TwoLevel { position, .. } = self.terrain {
                if (x - position).abs() < 2.0 * self.marker_radius {
                    x += self.marker_spacing;
                    continue;
                }
            }
            out.push(Marker {
                id,
                center: Vector3::new(x, y, self.terrain.height_at(x)),
                radius: self.marker_radius,
            });
            x += self.marker_spacing;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryPattern {
    SingleStrip,
    /// Parallel lines across the corridor width, alternating direction.
    Lawnmower,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub pattern: TrajectoryPattern,
    /// Height above the terrain base level, meters.
    pub altitude: f64,
    pub speed: f64,
    pub frame_rate: f64,
    /// Across-track overlap between lawnmower lines.
    pub overlap: f64,
    /// Survey length along `x`; `None` uses the scene extent.
    pub length: Option<f64>,
    pub max_frames: Option<usize>,
}

impl TrajectorySpec {
    /// Nadir strip at 2 m, 0.125 m/s, 0.5 fps.
    pub fn comex() -> Self {
        Self {
            pattern: TrajectoryPattern::SingleStrip,
            altitude: 2.0,
            speed: 0.125,
            frame_rate: 0.5,
            overlap: 0.6,
            length: None,
            max_frames: None,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.altitude > 0.0 && self.altitude.is_finite()) {
            return Err(SynthError::InvalidSpec("altitude must be positive".into()));
        }
        if !(self.speed >= 0.0 && self.frame_rate > 0.0) {
            return Err(SynthError::InvalidSpec(
                "speed must be >= 0 and frame rate positive".into(),
            ));
        }
        if !(self.overlap > 0.0 && self.overlap < 1.0) {
            return Err(SynthError::InvalidSpec("overlap must lie in (0, 1)".into()));
        }
        if let Some(l) = self.length {
            if !(l >= 0.0) {
                return Err(SynthError::InvalidSpec("length must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Along-track distance between consecutive frames.
    pub fn frame_spacing(&self) -> f64 {
        self.speed / self.frame_rate
    }
}

fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Camera poses with timestamps, in acquisition order.
pub fn trajectory(
    scene: &SceneSpec,
    traj: &TrajectorySpec,
    camera: &CameraModel,
) -> Result<Vec<TrajectoryRecord>, SynthError> {
    scene.validate()?;
    traj.validate()?;
    let length = traj.length.unwrap_or(scene.extent[0]);
    let spacing = traj.frame_spacing();
    let per_line = if spacing > 0.0 {
        (length / spacing + 1e-9).floor() as usize + 1
    } else {
        1
    };
    let lines: Vec<f64> = match traj.pattern {
        TrajectoryPattern::SingleStrip => vec![0.0],
        TrajectoryPattern::Lawnmower => {
            let footprint = traj.altitude * f64::from(camera.height) / camera.fy;
            let step = footprint * (1.0 - traj.overlap);
            let span = (scene.extent[1] - footprint).max(0.0);
            let n = if span > 0.0 {
                (span / step).ceil() as usize + 1
            } else {
                1
            };
            (0..n)
                .map(|i| {
                    if n == 1 {
                        0.0
                    } else {
                        -span / 2.0 + span * i as f64 / (n - 1) as f64
                    }
                })
                .collect()
        }
    };
    let forward = nadir_rotation::<f64>();
    let backward = rotation_z(std::f64::consts::PI) * forward;
    let mut out = Vec::new();
    'outer: for (line, &y) in lines.iter().enumerate() {
        for k in 0..per_line {
            let along = if spacing > 0.0 { k as f64 * spacing } else { 0.0 };
            let (x, rotation) = if line % 2 == 0 {
                (along, forward)
            } else {
                (length - along, backward)
            };
            let base = match scene.terrain {
                Terrain::Inclined { .. } => scene.terrain.height_at(x),
                Terrain::Flat { height } => height,
                Terrain::TwoLevel { .. } => 0.0,
            };
            let id = out.len() as u64;
            out.push(TrajectoryRecord {
                id,
                timestamp: id as f64 / traj.frame_rate,
                pose: Pose::from_rotation_nearest(rotation, Vector3::new(x, y, base + traj.altitude)),
            });
            if traj.max_frames.is_some_and(|m| out.len() >= m) {
                break 'outer;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Render through the camera's lens distortion.
    pub apply_distortion: bool,
    /// Standard deviation of additive per-channel Gaussian noise (gray levels).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            apply_distortion: true,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Ray-casting renderer for one scene and camera.
#[derive(Debug, Clone)]
pub struct Renderer {
    terrain: Terrain,
    field: TextureField,
    markers: Vec<Marker>,
    camera: CameraModel,
    options: RenderOptions,
    /// Camera-frame ray direction per raster pixel.
    rays: Vec<Option<Vector3<f64>>>,
}

/// Offset separating wall texture coordinates from the ground pattern.
const WALL_TEXTURE_OFFSET: f64 = 1000.0;

impl Renderer {
    pub fn new(scene: &SceneSpec, camera: &CameraModel, options: RenderOptions) -> Result<Self, SynthError> {
        scene.validate()?;
        camera
            .validate()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let mut rays = Vec::with_capacity(camera.width as usize * camera.height as usize);
        for v in 0..camera.height {
            for u in 0..camera.width {
                let observed = PixelCoord::new(f64::from(u), f64::from(v));
                let ideal = if options.apply_distortion {
                    undistort_pixel(observed, camera).ok()
                } else {
                    Some(observed)
                };
                rays.push(ideal.map(|p| {
                    let n = camera.pixel_to_normalized(p);
                    Vector3::new(n.x, n.y, 1.0)
                }));
            }
        }
        Ok(Self {
            terrain: scene.terrain,
            field: TextureField::new(scene.texture),
            markers: scene.markers(),
            camera: *camera,
            options,
            rays,
        })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    /// Noise-free color of the terrain at a world point on its surface.
    pub fn surface_color(&self, point: &Vector3<f64>) -> [f64; 3] {
        let on_wall = match self.terrain {
            Terrain::TwoLevel { height, position } => {
                (point.x - position).abs() < 1e-9 && point.z > 1e-9 && point.z < height - 1e-9
            }
            _ => false,
        };
        if on_wall {
            let g = self.field.gray(point.y + WALL_TEXTURE_OFFSET, point.z);
            self.field.color(g)
        } else {
            self.ground_color(point.x, point.y, self.field.gray(point.x, point.y))
        }
    }

    fn ground_color(&self, x: f64, y: f64, gray: f64) -> [f64; 3] {
        let mut c = self.field.color(gray);
        for m in &self.markers {
            if (x - m.center.x).abs() > 2.0 * m.radius || (y - m.center.y).abs() > 2.0 * m.radius {
                continue;
            }
            let a = m.coverage(x, y);
            if a > 0.0 {
                let mc = m.color();
                for k in 0..3 {
                    c[k] = (1.0 - a) * c[k] + a * mc[k];
                }
            }
        }
        c
    }

    pub fn render(&self, pose: &Pose, frame_seed: u64) -> RgbImage {
        let (w, h) = (self.camera.width, self.camera.height);
        let r = pose.rotation();
        let o = pose.center();
        let mut hits: Vec<Option<(Vector2<f64>, Surface)>> = Vec::with_capacity(self.rays.len());
        let mut bounds = [[f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY]; 2];
        for ray in &self.rays {
            let hit = ray.and_then(|d| {
                let dir = r * d;
                let (t, s) = self.terrain.intersect(o, &dir)?;
                let p = o + dir * t;
                let uv = match s {
                    Surface::Ground => Vector2::new(p.x, p.y),
                    Surface::Wall => Vector2::new(p.y + WALL_TEXTURE_OFFSET, p.z),
                };
                let b = &mut bounds[s as usize];
                b[0] = b[0].min(uv.x);
                b[1] = b[1].max(uv.x);
                b[2] = b[2].min(uv.y);
                b[3] = b[3].max(uv.y);
                Some((uv, s))
            });
            hits.push(hit);
        }
        let caches: Vec<_> = bounds
            .iter()
            .map(|b| (b[0] <= b[1]).then(|| self.field.cache(b[0], b[1], b[2], b[3])))
            .collect();
        let visible: Vec<&Marker> = {
            let b = bounds[Surface::Ground as usize];
            self.markers
                .iter()
                .filter(|m| {
                    m.center.x + 2.0 * m.radius >= b[0]
                        && m.center.x - 2.0 * m.radius <= b[1]
                        && m.center.y + 2.0 * m.radius >= b[2]
                        && m.center.y - 2.0 * m.radius <= b[3]
                })
                .collect()
        };
        let noise = (self.options.noise_sigma > 0.0).then(|| {
            (
                Normal::new(0.0, self.options.noise_sigma).expect("finite sigma"),
                ChaCha8Rng::seed_from_u64(self.options.seed ^ frame_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            )
        });
        let mut noise = noise;
        let mut img = RgbImage::new(w, h);
        for (idx, hit) in hits.iter().enumerate() {
            let Some((uv, s)) = hit else { continue };
            let gray = caches[*s as usize]
                .as_ref()
                .expect("bounds cover every hit")
                .gray(uv.x, uv.y);
            let mut c = self.field.color(gray);
            if *s == Surface::Ground {
                for m in &visible {
                    let a = m.coverage(uv.x, uv.y);
                    if a > 0.0 {
                        let mc = m.color();
                        for k in 0..3 {
                            c[k] = (1.0 - a) * c[k] + a * mc[k];
                        }
                    }
                }
            }
            if let Some((dist, rng)) = noise.as_mut() {
                for ck in c.iter_mut() {
                    *ck += dist.sample(rng);
                }
            }
            let x = (idx % w as usize) as u32;
            let y = (idx / w as usize) as u32;
            img.put_pixel(x, y, image::Rgb(crate::raster::to_rgb8(c)));
        }
        img
    }
}

/// A rendered (lazily) synthetic acquisition with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub scene: SceneSpec,
    pub trajectory_spec: TrajectorySpec,
    pub records: Vec<TrajectoryRecord>,
    pub ahrs: Vec<AhrsSample>,
    pub planes: Vec<(Plane, [f64; 2])>,
    renderer: Renderer,
}

impl SyntheticSequence {
    pub fn camera(&self) -> &CameraModel {
        self.renderer.camera()
    }

    pub fn markers(&self) -> &[Marker] {
        self.renderer.markers()
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, index: usize) -> RgbImage {
        let rec = &self.records[index];
        self.renderer.render(&rec.pose, rec.id)
    }

    /// Writes `images/`, `trajectory.txt`, `ahrs.txt`, `camera.txt`,
    /// `markers.txt` and `manifest.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(io_err(&images))?;
        for (i, rec) in self.records.iter().enumerate() {
            let path = images.join(image_file_name(rec.id));
            self.image(i).save(&path)?;
        }
        let write = |name: &str, text: String| -> Result<(), SynthError> {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(io_err(&path))
        };
        write("trajectory.txt", format_trajectory(&self.records))?;
        write("ahrs.txt", format_ahrs(&self.ahrs))?;
        write("camera.txt", self.camera().to_calibration_text())?;
        write("markers.txt", format_markers(self.markers()))?;
        write("manifest.txt", self.manifest())?;
        Ok(())
    }

    fn manifest(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("frames", self.records.len().to_string());
        kv.insert("terrain", terrain_name(&self.scene.terrain).to_string());
        kv.insert("altitude", format!("{:?}", self.trajectory_spec.altitude));
        kv.insert("frame_rate", format!("{:?}", self.trajectory_spec.frame_rate));
        kv.insert("plane_count", self.planes.len().to_string());
        for (i, (p, range)) in self.planes.iter().enumerate() {
            let n = p.normal();
            kv.insert(
                &format!("plane{i}"),
                format!("{:?} {:?} {:?} {:?} {:?} {:?}", n.x, n.y, n.z, p.offset(), range[0], range[1]),
            );
        }
        kv.to_text()
    }
}

pub fn image_file_name(id: u64) -> String {
    format!("frame_{id:06}.png")
}

fn terrain_name(t: &Terrain) -> &'static str {
    match t {
        Terrain::Flat { .. } => "flat",
        Terrain::TwoLevel { .. } => "two_level",
        Terrain::Inclined { .. } => "inclined",
    }
}

/// Lines of `id x y z radius`.
pub fn format_markers(markers: &[Marker]) -> String {
    let mut out = String::new();
    for m in markers {
        writeln!(
            out,
            "{} {:?} {:?} {:?} {:?}",
            m.id, m.center.x, m.center.y, m.center.z, m.radius
        )
        .unwrap();
    }
    out
}

pub fn parse_markers(text: &str) -> Result<Vec<Marker>, SynthError> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || SynthError::InvalidSpec(format!("bad marker line: {line}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(Marker {
                id: f[0].parse().map_err(|_| bad())?,
                center: Vector3::new(num(f[1])?, num(f[2])?, num(f[3])?),
                radius: num(f[4])?,
            })
        })
        .collect()
}

/// Renders the acquisition described by the specs. Images are produced on
/// demand; identical inputs give bit-identical outputs.
pub fn render_sequence(
    scene: &SceneSpec,
    traj: &TrajectorySpec,
    camera: &CameraModel,
    options: RenderOptions,
) -> Result<SyntheticSequence, SynthError> {
    let records = trajectory(scene, traj, camera)?;
    let ahrs = records
        .iter()
        .map(|r| AhrsSample::from_rotation(r.timestamp, r.pose.rotation()))
        .collect();
    Ok(SyntheticSequence {
        scene: scene.clone(),
        trajectory_spec: traj.clone(),
        records,
        ahrs,
        planes: scene.terrain.planes(),
        renderer: Renderer::new(scene, camera, options)?,
    })
}

/// 968 x 728 pinhole with an 800 px focal length.
pub fn comex_camera() -> CameraModel {
    CameraModel::pinhole(800.0, 968, 728).expect("valid preset")
}

/// Complete synthesis request, as read from a key = value scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scene: SceneSpec,
    pub trajectory: TrajectorySpec,
    pub camera: CameraModel,
    pub options: RenderOptions,
}

impl SynthConfig {
    pub fn comex() -> Self {
        Self {
            scene: SceneSpec::comex(),
            trajectory: TrajectorySpec::comex(),
            camera: comex_camera(),
            options: RenderOptions::default(),
        }
    }

    /// Keys absent from `kv` keep their COMEX preset values. Camera keys are
    /// `focal`, `width`, `height` (pinhole) or a `camera` file path.
    pub fn from_key_values(kv: &KeyValues, base_dir: &Path) -> Result<Self, SynthError> {
        let mut c = Self::comex();
        let preset = kv.get_or("preset", "comex".to_string())?;
        if preset != "comex" {
            return Err(SynthError::InvalidSpec(format!("unknown preset {preset}")));
        }
        let terrain = kv.get_or("terrain", "flat".to_string())?;
        c.scene.terrain = match terrain.as_str() {
            "flat" => Terrain::Flat {
                height: kv.get_or("terrain_height", 0.0)?,
            },
            "two_level" => Terrain::TwoLevel {
                height: kv.require("step_height")?,
                position: kv.get_or("step_position", c.scene.extent[0] / 2.0)?,
            },
            "inclined" => Terrain::Inclined {
                angle_degrees: kv.require("angle")?,
            },
            other => return Err(SynthError::InvalidSpec(format!("unknown terrain {other}"))),
        };
        c.scene.texture.seed = kv.get_or("texture_seed", c.scene.texture.seed)?;
        c.scene.texture.blob_density = kv.get_or("blob_density", c.scene.texture.blob_density)?;
        c.scene.extent[0] = kv.get_or("extent_x", c.scene.extent[0])?;
        c.scene.extent[1] = kv.get_or("extent_y", c.scene.extent[1])?;
        c.scene.marker_spacing = kv.get_or("marker_spacing", c.scene.marker_spacing)?;
        c.scene.marker_radius = kv.get_or("marker_radius", c.scene.marker_radius)?;
        c.scene.marker_offset = kv.get_or("marker_offset", c.scene.marker_offset)?;

        let t = &mut c.trajectory;
        t.pattern = match kv.get_or("pattern", "single_strip".to_string())?.as_str() {
            "single_strip" => TrajectoryPattern::SingleStrip,
            "lawnmower" => TrajectoryPattern::Lawnmower,
            other => return Err(SynthError::InvalidSpec(format!("unknown pattern {other}"))),
        };
        t.altitude = kv.get_or("altitude", t.altitude)?;
        t.speed = kv.get_or("speed", t.speed)?;
        t.frame_rate = kv.get_or("frame_rate", t.frame_rate)?;
        t.overlap = kv.get_or("overlap", t.overlap)?;
        if kv.contains("length") {
            t.length = Some(kv.require("length")?);
        }
        if kv.contains("frames") {
            t.max_frames = Some(kv.require("frames")?);
        }

        if kv.contains("camera") {
            let path: String = kv.require("camera")?;
            let path = base_dir.join(path);
            c.camera = CameraModel::from_calibration_file(&path)
                .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        } else {
            let focal = kv.get_or("focal", 800.0)?;
            let width = kv.get_or("width", 968u32)?;
            let height = kv.get_or("height", 728u32)?;
            c.camera = CameraModel::pinhole(focal, width, height)
                .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        }
        c.options.apply_distortion = kv.get_or("apply_distortion", true)?;
        c.options.noise_sigma = kv.get_or("noise_sigma", 0.0)?;
        c.options.seed = kv.get_or("seed", 0u64)?;
        c.scene.validate()?;
        c.trajectory.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, SynthError> {
        let kv = KeyValues::from_file(path)?;
        Self::from_key_values(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn render(&self) -> Result<SyntheticSequence, SynthError> {
        render_sequence(&self.scene, &self.trajectory, &self.camera, self.options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project, unproject};

    fn small_camera() -> CameraModel {
        CameraModel::pinhole(200.0, 160, 120).unwrap()
    }

    #[test]
    fn comex_preset_geometry() {
        let seq = trajectory(&SceneSpec::comex(), &TrajectorySpec::comex(), &comex_camera()).unwrap();
        assert_eq!(seq.len(), 121);
        assert_eq!(seq[1].timestamp, 2.0);
        assert!((seq[120].pose.center().x - 30.0).abs() < 1e-12);
        assert!(seq.iter().all(|r| r.pose.center().z == 2.0));
    }

    #[test]
    fn zero_length_trajectory_gives_one_frame() {
        let mut t = TrajectorySpec::comex();
        t.length = Some(0.0);
        let seq = trajectory(&SceneSpec::comex(), &t, &comex_camera()).unwrap();
        assert_eq!(seq.len(), 1);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut t = TrajectorySpec::comex();
        t.altitude = -1.0;
        assert!(matches!(
            trajectory(&SceneSpec::comex(), &t, &comex_camera()),
            Err(SynthError::InvalidSpec(_))
        ));
        let mut s = SceneSpec::comex();
        s.terrain = Terrain::TwoLevel {
            height: -0.5,
            position: 3.0,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn lawnmower_alternates_direction() {
        let mut scene = SceneSpec::comex();
        scene.extent = [2.0, 4.0];
        let mut t = TrajectorySpec::comex();
        t.pattern = TrajectoryPattern::Lawnmower;
        let recs = trajectory(&scene, &t, &comex_camera()).unwrap();
        let ys: Vec<f64> = recs.iter().map(|r| r.pose.center().y).collect();
        let mut lines = ys.clone();
        lines.dedup();
        assert!(lines.len() >= 2);
        let back = recs.iter().find(|r| r.pose.center().y == lines[1]).unwrap();
        assert!((back.pose.rotation()[(0, 0)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_level_ray_casting() {
        let t = Terrain::TwoLevel {
            height: 1.0,
            position: 5.0,
        };
        let o = Vector3::new(4.0, 0.0, 2.0);
        let (t0, s) = t.intersect(&o, &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!((t0, s), (2.0, Surface::Ground));
        let (t1, _) = t.intersect(&Vector3::new(6.0, 0.0, 2.0), &Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!(t1, 1.0);
        // Looking forward and down at the wall.
        let (tw, s) = t.intersect(&o, &Vector3::new(1.0, 0.0, -1.5)).unwrap();
        assert_eq!(s, Surface::Wall);
        assert!((tw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rendering_is_consistent_with_unprojection() {
        for terrain in [
            Terrain::Flat { height: 0.0 },
            Terrain::TwoLevel {
                height: 1.0,
                position: 0.3,
            },
            Terrain::Inclined { angle_degrees: 10.0 },
        ] {
            let mut scene = SceneSpec::comex();
            scene.terrain = terrain;
            scene.marker_spacing = 0.5;
            let cam = small_camera();
            let r = Renderer::new(&scene, &cam, RenderOptions::default()).unwrap();
            let pose = Pose::from_rotation_nearest(nadir_rotation(), Vector3::new(0.2, 0.1, 2.0));
            let img = r.render(&pose, 0);
            for (u, v) in [(0u32, 0u32), (17, 33), (80, 60), (159, 119), (101, 7)] {
                let ray = unproject(PixelCoord::new(f64::from(u), f64::from(v)), &pose, &cam);
                let (t, _) = terrain.intersect(&ray.origin, &ray.direction).unwrap();
                let expected = crate::raster::to_rgb8(r.surface_color(&ray.at(t)));
                let got = img.get_pixel(u, v).0;
                for k in 0..3 {
                    assert!((i32::from(got[k]) - i32::from(expected[k])).abs() <= 1, "{terrain:?}");
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = SceneSpec::comex();
        let cam = small_camera();
        let opts = RenderOptions {
            noise_sigma: 1.5,
            seed: 9,
            ..RenderOptions::default()
        };
        let a = Renderer::new(&scene, &cam, opts).unwrap();
        let b = Renderer::new(&scene, &cam, opts).unwrap();
        let pose = Pose::from_rotation_nearest(nadir_rotation(), Vector3::new(1.0, 0.0, 2.0));
        assert_eq!(a.render(&pose, 3), b.render(&pose, 3));
    }

    #[test]
    fn markers_are_visible_in_renders() {
        let scene = SceneSpec::comex();
        let cam = comex_camera();
        let r = Renderer::new(&scene, &cam, RenderOptions::default()).unwrap();
        let m = r.markers()[0];
        let pose = Pose::from_rotation_nearest(nadir_rotation(), Vector3::new(m.center.x, 0.0, 2.0));
        let img = r.render(&pose, 0);
        let p = project(&m.center, &pose, &cam, true).unwrap();
        let rgb = img.get_pixel(p.u.round() as u32, p.v.round() as u32).0;
        assert_eq!(classify_marker_hue(rgb), Some(m.id % MARKER_HUES));
    }

    #[test]
    fn distorted_render_matches_projection() {
        let scene = SceneSpec::comex();
        let mut cam = small_camera();
        cam.distortion = crate::DistortionCoefficients::radial(-0.2, 0.05, 0.0);
        let r = Renderer::new(&scene, &cam, RenderOptions::default()).unwrap();
        let pose = Pose::from_rotation_nearest(nadir_rotation(), Vector3::new(0.0, 0.0, 2.0));
        let img = r.render(&pose, 0);
        let x = Vector3::new(0.3, -0.2, 0.0);
        let p = project(&x, &pose, &cam, true).unwrap();
        let c = crate::raster::sample_bilinear(&img, p).unwrap();
        let e = r.surface_color(&x);
        assert!((c[0] - e[0]).abs() < 6.0, "{c:?} vs {e:?}");
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig::comex();
        cfg.camera = small_camera();
        cfg.trajectory.max_frames = Some(3);
        let seq = cfg.render().unwrap();
        seq.write(dir.path()).unwrap();
        let recs = crate::pose_engine::replay::parse_trajectory(
            &std::fs::read_to_string(dir.path().join("trajectory.txt")).unwrap(),
        )
        .unwrap();
        assert_eq!(recs, seq.records);
        let markers = parse_markers(&std::fs::read_to_string(dir.path().join("markers.txt")).unwrap()).unwrap();
        assert_eq!(markers, seq.markers());
        for id in 0..3 {
            assert!(dir.path().join("images").join(image_file_name(id)).exists());
        }
        let cam = CameraModel::from_calibration_file(&dir.path().join("camera.txt")).unwrap();
        assert_eq!(cam, small_camera());
    }

    #[test]
    fn scene_file_parsing() {
        let kv = KeyValues::parse("terrain = two_level\nstep_height = 1.0\nframes = 4\nwidth = 320\nheight = 240\nfocal = 300").unwrap();
        let cfg = SynthConfig::from_key_values(&kv, Path::new(".")).unwrap();
        assert_eq!(
            cfg.scene.terrain,
            Terrain::TwoLevel {
                height: 1.0,
                position: 15.0
            }
        );
        assert_eq!(cfg.trajectory.max_frames, Some(4));
        assert_eq!(cfg.camera.width, 320);
        let bad = KeyValues::parse("terrain = hills").unwrap();
        assert!(SynthConfig::from_key_values(&bad, Path::new(".")).is_err());
    }
}
