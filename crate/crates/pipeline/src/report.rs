//! Run summary written to `report.txt`.

use std::collections::BTreeMap;

use seamosaic_core::keyvalue::KeyValues;

use crate::PipelineError;

/// Per-stage processing times, seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTiming {
    pub samples: Vec<f64>,
}

impl StageTiming {
    pub fn push(&mut self, seconds: f64) {
        self.samples.push(seconds);
    }

    /// Nearest-rank percentile, `q` in `[0, 1]`.
    pub fn percentile(&self, q: f64) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let mut s = self.samples.clone();
        s.sort_by(f64::total_cmp);
        let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
        Some(s[rank - 1])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub frames_processed: usize,
    pub frames_tracked: usize,
    pub frames_lost: usize,
    pub frames_pending: usize,
    pub keyframes: usize,
    pub planarity_skips: usize,
    pub segments: usize,
    pub tiles: usize,
    pub chunks: usize,
    pub points: usize,
    pub restarts: usize,
    pub terminated_on_loss: bool,
    pub elapsed_seconds: f64,
    /// Tracked frames per second of wall time.
    pub pose_rate_hz: f64,
    /// Chunks per second between the first and last chunk.
    pub cloud_rate_hz: f64,
    pub timings: BTreeMap<String, StageTiming>,
    pub markers_matched: Option<usize>,
    /// Similarity residual RMS (Euclidean, per point) of surveyed markers,
    /// meters.
    pub marker_rms: Option<f64>,
    /// Similarity residual RMS (Euclidean, per point) of camera centers,
    /// meters.
    pub trajectory_rms: Option<f64>,
}

impl RunReport {
    pub fn is_consistent(&self) -> bool {
        self.frames_tracked + self.frames_lost + self.frames_pending == self.frames_processed
    }

    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.insert("frames_processed", self.frames_processed);
        kv.insert("frames_tracked", self.frames_tracked);
        kv.insert("frames_lost", self.frames_lost);
        kv.insert("frames_pending", self.frames_pending);
        kv.insert("keyframes", self.keyframes);
        kv.insert("planarity_skips", self.planarity_skips);
        kv.insert("segments", self.segments);
        kv.insert("tiles", self.tiles);
        kv.insert("chunks", self.chunks);
        kv.insert("points", self.points);
        kv.insert("restarts", self.restarts);
        kv.insert("terminated_on_loss", self.terminated_on_loss);
        kv.insert("elapsed_seconds", format!("{:.3}", self.elapsed_seconds));
        kv.insert("pose_rate_hz", format!("{:.3}", self.pose_rate_hz));
        kv.insert("cloud_rate_hz", format!("{:.3}", self.cloud_rate_hz));
        for (stage, t) in &self.timings {
            for (name, q) in [("p50", 0.5), ("p90", 0.9), ("max", 1.0)] {
                if let Some(v) = t.percentile(q) {
                    kv.insert(&format!("{stage}_{name}_ms"), format!("{:.3}", v * 1e3));
                }
            }
        }
        if let Some(n) = self.markers_matched {
            kv.insert("markers_matched", n);
        }
        if let Some(r) = self.marker_rms {
            kv.insert("marker_rms_m", format!("{r:.6e}"));
        }
        if let Some(r) = self.trajectory_rms {
            kv.insert("trajectory_rms_m", format!("{r:.6e}"));
        }
        kv.to_text()
    }

    /// Reads the counters and rates back; stage timings are not restored.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let kv = KeyValues::parse(text).map_err(|e| PipelineError::Input(format!("report: {e}")))?;
        let err = |e: seamosaic_core::keyvalue::KeyValueError| PipelineError::Input(format!("report: {e}"));
        Ok(Self {
            frames_processed: kv.require("frames_processed").map_err(err)?,
            frames_tracked: kv.require("frames_tracked").map_err(err)?,
            frames_lost: kv.require("frames_lost").map_err(err)?,
            frames_pending: kv.require("frames_pending").map_err(err)?,
            keyframes: kv.require("keyframes").map_err(err)?,
            planarity_skips: kv.require("planarity_skips").map_err(err)?,
            segments: kv.require("segments").map_err(err)?,
            tiles: kv.require("tiles").map_err(err)?,
            chunks: kv.require("chunks").map_err(err)?,
            points: kv.require("points").map_err(err)?,
            restarts: kv.require("restarts").map_err(err)?,
            terminated_on_loss: kv.require("terminated_on_loss").map_err(err)?,
            elapsed_seconds: kv.require("elapsed_seconds").map_err(err)?,
            pose_rate_hz: kv.require("pose_rate_hz").map_err(err)?,
            cloud_rate_hz: kv.require("cloud_rate_hz").map_err(err)?,
            timings: BTreeMap::new(),
            markers_matched: kv.get("markers_matched").map_err(err)?,
            marker_rms: kv.get("marker_rms_m").map_err(err)?,
            trajectory_rms: kv.get("trajectory_rms_m").map_err(err)?,
        })
    }
}
