//! Planar point clouds: a grid of image pixels is cast onto the local plane,
//! giving a colored patch per keyframe that approximates the surface.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::Vector3;
use thiserror::Error;

use crate::camera::{undistort_pixel, unproject};
use crate::raster::{sample_bilinear, to_rgb8};
use crate::{CameraModel, PixelCoord, Plane, Pose};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("invalid grid {cols}x{rows}")]
    InvalidGrid { cols: usize, rows: usize },
    #[error("no grid ray hits the plane")]
    EmptyChunk,
    #[error("frame {0} already accumulated")]
    DuplicateFrame(u64),
    #[error("cannot write an empty cloud")]
    EmptyCloud,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed PLY: {0}")]
    Format(String),
}

/// Sampling grid over the raster (inclusive of the border pixels).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { cols: 150, rows: 100 }
    }
}

impl GridSpec {
    pub fn validate(&self, budget: usize) -> Result<(), ProjectionError> {
        if self.cols < 2 || self.rows < 2 || self.cols * self.rows > budget {
            return Err(ProjectionError::InvalidGrid {
                cols: self.cols,
                rows: self.rows,
            });
        }
        Ok(())
    }

    /// Raster coordinates of node `(i, j)`.
    pub fn node(&self, i: usize, j: usize, width: u32, height: u32) -> PixelCoord {
        let u = i as f64 * f64::from(width - 1) / (self.cols - 1) as f64;
        let v = j as f64 * f64::from(height - 1) / (self.rows - 1) as f64;
        PixelCoord::new(u, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloudChunk {
    pub frame_id: u64,
    pub segment_id: u64,
    pub points: Vec<CloudPoint>,
    pub plane: Plane,
}

/// Rays with `|n . d|` at or below this are treated as grazing (2 degrees).
pub fn grazing_cutoff() -> f64 {
    2f64.to_radians().sin()
}

/// Casts the grid nodes of `image` onto `plane`.
pub fn project_image_plane(
    frame_id: u64,
    segment_id: u64,
    image: &RgbImage,
    pose: &Pose,
    camera: &CameraModel,
    plane: &Plane,
    grid: &GridSpec,
) -> Result<CloudChunk, ProjectionError> {
    grid.validate(usize::MAX)?;
    let (w, h) = (image.width(), image.height());
    if w < 2 || h < 2 {
        return Err(ProjectionError::EmptyChunk);
    }
    let min_sin = grazing_cutoff();
    let mut points = Vec::with_capacity(grid.cols * grid.rows);
    for j in 0..grid.rows {
        for i in 0..grid.cols {
            let node = grid.node(i, j, w, h);
            let Ok(ideal) = undistort_pixel(node, camera) else { continue };
            let ray = unproject(ideal, pose, camera);
            let Some(x) = plane.intersect_ray(&ray, min_sin) else { continue };
            let Some(color) = sample_bilinear(image, node) else { continue };
            points.push(CloudPoint {
                position: plane.project_point(&x),
                color: to_rgb8(color),
            });
        }
    }
    if points.is_empty() {
        return Err(ProjectionError::EmptyChunk);
    }
    Ok(CloudChunk {
        frame_id,
        segment_id,
        points,
        plane: *plane,
    })
}

/// Append-only store of chunks, indexed by frame.
#[derive(Debug, Clone, Default)]
pub struct CloudStore {
    chunks: Vec<CloudChunk>,
    by_frame: HashMap<u64, usize>,
    total: usize,
}

impl CloudStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, chunk: CloudChunk) -> Result<(), ProjectionError> {
        if self.by_frame.contains_key(&chunk.frame_id) {
            return Err(ProjectionError::DuplicateFrame(chunk.frame_id));
        }
        self.total += chunk.points.len();
        self.by_frame.insert(chunk.frame_id, self.chunks.len());
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn chunk(&self, frame_id: u64) -> Option<&CloudChunk> {
        self.by_frame.get(&frame_id).map(|&k| &self.chunks[k])
    }

    pub fn segment(&self, segment_id: u64) -> impl Iterator<Item = &CloudChunk> {
        self.chunks.iter().filter(move |c| c.segment_id == segment_id)
    }

    pub fn chunks(&self) -> &[CloudChunk] {
        &self.chunks
    }

    pub fn point_count(&self) -> usize {
        self.total
    }

    pub fn points(&self) -> impl Iterator<Item = &CloudPoint> {
        self.chunks.iter().flat_map(|c| c.points.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Writes every accumulated point in chunk order.
    pub fn write_ply(&self, path: &Path, ascii: bool) -> Result<usize, ProjectionError> {
        write_ply_counted(self.points(), self.total, path, ascii)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ProjectionError + '_ {
    move |source| ProjectionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// PLY with double `x y z` and uchar `red green blue`; binary little-endian
/// unless `ascii`.
pub fn write_ply<'a, I>(points: I, path: &Path, ascii: bool) -> Result<usize, ProjectionError>
where
    I: IntoIterator<Item = &'a CloudPoint>,
    I::IntoIter: ExactSizeIterator,
{
    let points = points.into_iter();
    let n = points.len();
    write_ply_counted(points, n, path, ascii)
}

fn write_ply_counted<'a>(
    points: impl Iterator<Item = &'a CloudPoint>,
    n: usize,
    path: &Path,
    ascii: bool,
) -> Result<usize, ProjectionError> {
    if n == 0 {
        return Err(ProjectionError::EmptyCloud);
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let format = if ascii { "ascii" } else { "binary_little_endian" };
    let header = format!(
        "ply\nformat {format} 1.0\nelement vertex {n}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    );
    out.write_all(header.as_bytes()).map_err(io_err(path))?;
    for p in points {
        if ascii {
            writeln!(
                out,
                "{:?} {:?} {:?} {} {} {}",
                p.position.x, p.position.y, p.position.z, p.color[0], p.color[1], p.color[2]
            )
        } else {
            let mut rec = [0u8; 27];
            for k in 0..3 {
                rec[k * 8..k * 8 + 8].copy_from_slice(&p.position[k].to_le_bytes());
            }
            rec[24..].copy_from_slice(&p.color);
            out.write_all(&rec)
        }
        .map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;
    Ok(n)
}

/// Reads files produced by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<CloudPoint>, ProjectionError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut count = None;
    let mut ascii = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(ProjectionError::Format("missing end_header".into()));
        }
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if let Some(f) = line.strip_prefix("format ") {
            ascii = Some(f.starts_with("ascii"));
        } else if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| ProjectionError::Format(line.into()))?);
        }
    }
    let (Some(n), Some(ascii)) = (count, ascii) else {
        return Err(ProjectionError::Format("missing format or vertex count".into()));
    };
    let mut points = Vec::with_capacity(n);
    if ascii {
        for line in reader.lines().take(n) {
            let line = line.map_err(io_err(path))?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(ProjectionError::Format(format!("bad vertex line {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| ProjectionError::Format(s.into()));
            let byte = |s: &str| s.parse::<u8>().map_err(|_| ProjectionError::Format(s.into()));
            points.push(CloudPoint {
                position: Vector3::new(num(f[0])?, num(f[1])?, num(f[2])?),
                color: [byte(f[3])?, byte(f[4])?, byte(f[5])?],
            });
        }
    } else {
        let mut rec = [0u8; 27];
        for _ in 0..n {
            reader.read_exact(&mut rec).map_err(io_err(path))?;
            let f = |k: usize| f64::from_le_bytes(rec[k * 8..k * 8 + 8].try_into().expect("8 bytes"));
            points.push(CloudPoint {
                position: Vector3::new(f(0), f(1), f(2)),
                color: [rec[24], rec[25], rec[26]],
            });
        }
    }
    if points.len() != n {
        return Err(ProjectionError::Format(format!("expected {n} vertices, found {}", points.len())));
    }
    Ok(points)
}
