//! Where frames come from: an image directory on disk, or a synthetic
//! sequence rendered on demand.

use std::path::{Path, PathBuf};

use image::RgbImage;
use seamosaic_core::synthetic::SyntheticSequence;

use crate::PipelineError;

#[derive(Debug, Clone)]
pub struct SourceFrame {
    pub id: u64,
    pub timestamp: f64,
    pub image: RgbImage,
}

/// A finite, ordered frame stream. Sources move to the acquisition thread.
pub trait FrameSource: Send {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads frame `index` (0-based, in acquisition order).
    fn frame(&mut self, index: usize) -> Result<SourceFrame, PipelineError>;
}

/// PNG or JPEG files sorted by name. Names like `frame_000042.png` give
/// frame id 42; otherwise the sorted index is the id.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    files: Vec<(u64, PathBuf)>,
    fps: f64,
    timestamps: Option<std::collections::BTreeMap<u64, f64>>,
}

fn id_from_name(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    if digits.is_empty() {
        return None;
    }
    digits.chars().rev().collect::<String>().parse().ok()
}

impl DirectorySource {
    pub fn open(dir: &Path, fps: f64) -> Result<Self, PipelineError> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| PipelineError::Input(format!("cannot read image directory {}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(PipelineError::Input(format!("no .png or .jpg images in {}", dir.display())));
        }
        let named: Option<Vec<u64>> = paths.iter().map(|p| id_from_name(p)).collect();
        let ids: Vec<u64> = match named {
            Some(ids) if ids.windows(2).all(|w| w[0] < w[1]) => ids,
            _ => (0..paths.len() as u64).collect(),
        };
        Ok(Self {
            files: ids.into_iter().zip(paths).collect(),
            fps,
            timestamps: None,
        })
    }

    /// Uses trajectory timestamps instead of `id / fps`.
    pub fn with_timestamps(mut self, timestamps: std::collections::BTreeMap<u64, f64>) -> Self {
        self.timestamps = Some(timestamps);
        self
    }

    pub fn truncate(&mut self, n: usize) {
        self.files.truncate(n);
    }
}

impl FrameSource for DirectorySource {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn frame(&mut self, index: usize) -> Result<SourceFrame, PipelineError> {
        let (id, path) = &self.files[index];
        let image = image::open(path)
            .map_err(|e| PipelineError::Input(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let timestamp = self
            .timestamps
            .as_ref()
            .and_then(|t| t.get(id).copied())
            .unwrap_or(*id as f64 / self.fps);
        Ok(SourceFrame {
            id: *id,
            timestamp,
            image,
        })
    }
}

/// Renders frames of a synthetic sequence as they are requested.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    sequence: SyntheticSequence,
    count: usize,
}

impl SequenceSource {
    pub fn new(sequence: SyntheticSequence) -> Self {
        let count = sequence.len();
        Self { sequence, count }
    }

    pub fn truncate(&mut self, n: usize) {
        self.count = self.count.min(n);
    }
}

impl FrameSource for SequenceSource {
    fn len(&self) -> usize {
        self.count
    }

    fn frame(&mut self, index: usize) -> Result<SourceFrame, PipelineError> {
        let rec = &self.sequence.records[index];
        Ok(SourceFrame {
            id: rec.id,
            timestamp: rec.timestamp,
            image: self.sequence.image(index),
        })
    }
}
