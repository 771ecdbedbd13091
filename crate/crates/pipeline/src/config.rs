//! Run configuration, read from the same `key = value` format as the camera
//! file. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use seamosaic_core::keyvalue::KeyValues;
use seamosaic_core::mosaic::{MosaicConfig, ReinitConfig};
use seamosaic_core::plane::PlanarityConfig;
use seamosaic_core::pose_engine::EngineConfig;
use seamosaic_core::projection::GridSpec;
use seamosaic_stream::{HubConfig, RateBudget};

use crate::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Images only; poses come from visual odometry.
    ImageDirectory,
    /// Images plus a trajectory file with known poses.
    ReplayWithTrajectory,
}

impl FromStr for InputMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image_directory" => Ok(Self::ImageDirectory),
            "replay_with_trajectory" => Ok(Self::ReplayWithTrajectory),
            other => Err(format!("unknown input mode {other:?} (use image_directory or replay_with_trajectory)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaneSource {
    Ransac,
    Ahrs,
}

impl FromStr for PlaneSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ransac" => Ok(Self::Ransac),
            "ahrs" => Ok(Self::Ahrs),
            other => Err(format!("unknown plane source {other:?} (use ransac or ahrs)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFitConfig {
    pub source: PlaneSource,
    /// RANSAC threshold as a fraction of the scene scale.
    pub threshold_factor: f64,
    pub max_iterations: usize,
    pub planarity: PlanarityConfig,
}

impl Default for PlaneFitConfig {
    fn default() -> Self {
        Self {
            source: PlaneSource::Ransac,
            threshold_factor: 0.02,
            max_iterations: 500,
            planarity: PlanarityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub camera: PathBuf,
    pub input: InputMode,
    pub images: PathBuf,
    pub trajectory: Option<PathBuf>,
    pub ahrs: Option<PathBuf>,
    /// Ground-truth markers and trajectory enable accuracy figures.
    pub markers: Option<PathBuf>,
    pub truth_trajectory: Option<PathBuf>,
    /// Acquisition rate used for pacing and for timestamps when no
    /// trajectory is given.
    pub fps: f64,
    /// Forward every n-th keyframe to mosaicing and projection.
    pub mosaic_stride: usize,
    pub divisor: u32,
    pub max_frames: Option<usize>,
    pub engine: EngineConfig,
    pub plane: PlaneFitConfig,
    pub mosaic: MosaicConfig,
    pub grid: GridSpec,
    pub stream: HubConfig,
    pub listen: Option<String>,
    pub output: PathBuf,
    /// Run directory name; defaults to a UTC timestamp.
    pub run_name: Option<String>,
    pub ply_ascii: bool,
    pub seed: u64,
}

impl RunConfig {
    /// Defaults for everything but the camera file.
    pub fn new(camera: PathBuf) -> Self {
        Self {
            camera,
            input: InputMode::ImageDirectory,
            images: PathBuf::from("images"),
            trajectory: None,
            ahrs: None,
            markers: None,
            truth_trajectory: None,
            fps: 0.5,
            mosaic_stride: 1,
            divisor: 1,
            max_frames: None,
            engine: EngineConfig::default(),
            plane: PlaneFitConfig::default(),
            mosaic: MosaicConfig::default(),
            grid: GridSpec::default(),
            stream: HubConfig::default(),
            listen: None,
            output: PathBuf::from("run"),
            run_name: None,
            ply_ascii: false,
            seed: 0,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let kv = KeyValues::from_file(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_key_values(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_key_values(kv: &KeyValues, base: &Path) -> Result<Self, PipelineError> {
        let cfg_err = |e: seamosaic_core::keyvalue::KeyValueError| PipelineError::Config(e.to_string());
        let path = |key: &str| -> Result<Option<PathBuf>, PipelineError> {
            Ok(kv.get::<String>(key).map_err(cfg_err)?.map(|p| base.join(p)))
        };
        let camera = path("camera")?.ok_or_else(|| PipelineError::Config("missing key `camera` (path to the calibration file)".into()))?;
        let mut c = Self::new(camera);
        let parsed = |key: &str| -> Result<Option<String>, PipelineError> { kv.get::<String>(key).map_err(cfg_err) };
        if let Some(s) = parsed("input")? {
            c.input = s.parse().map_err(PipelineError::Config)?;
        }
        if let Some(p) = path("images")? {
            c.images = p;
        } else {
            c.images = base.join("images");
        }
        c.trajectory = path("trajectory")?;
        c.ahrs = path("ahrs")?;
        c.markers = path("markers")?;
        c.truth_trajectory = path("truth_trajectory")?;
        c.fps = kv.get_or("fps", c.fps).map_err(cfg_err)?;
        c.mosaic_stride = kv.get_or("mosaic_stride", c.mosaic_stride).map_err(cfg_err)?;
        c.divisor = kv.get_or("divisor", c.divisor).map_err(cfg_err)?;
        c.max_frames = kv.get("max_frames").map_err(cfg_err)?;
        c.seed = kv.get_or("seed", c.seed).map_err(cfg_err)?;

        let e = &mut c.engine;
        e.window_size = kv.get_or("window", e.window_size).map_err(cfg_err)?;
        e.essential_threshold = kv.get_or("essential_threshold", e.essential_threshold).map_err(cfg_err)?;
        e.min_init_inliers = kv.get_or("min_init_inliers", e.min_init_inliers).map_err(cfg_err)?;
        e.min_init_parallax_px = kv.get_or("min_init_parallax_px", e.min_init_parallax_px).map_err(cfg_err)?;
        e.min_triangulation_angle = kv.get_or("min_triangulation_angle", e.min_triangulation_angle).map_err(cfg_err)?;
        e.seed = c.seed;

        let p = &mut c.plane;
        if let Some(s) = parsed("plane_source")? {
            p.source = s.parse().map_err(PipelineError::Config)?;
        }
        p.threshold_factor = kv.get_or("ransac_threshold", p.threshold_factor).map_err(cfg_err)?;
        p.max_iterations = kv.get_or("ransac_iterations", p.max_iterations).map_err(cfg_err)?;
        p.planarity.rel_residual_max = kv.get_or("planarity_residual", p.planarity.rel_residual_max).map_err(cfg_err)?;
        p.planarity.min_inlier_fraction = kv.get_or("planarity_inliers", p.planarity.min_inlier_fraction).map_err(cfg_err)?;

        let m = &mut c.mosaic;
        if let Some(s) = parsed("blend")? {
            m.blend = s.parse().map_err(|e: seamosaic_core::mosaic::MosaicError| PipelineError::Config(e.to_string()))?;
        }
        m.gsd = kv.get("gsd").map_err(cfg_err)?;
        m.max_canvas_side = kv.get_or("max_canvas_side", m.max_canvas_side).map_err(cfg_err)?;
        let r: &mut ReinitConfig = &mut m.reinit;
        r.max_normal_change_deg = kv.get_or("reinit_angle", r.max_normal_change_deg).map_err(cfg_err)?;
        r.rel_residual_max = kv.get_or("reinit_residual", r.rel_residual_max).map_err(cfg_err)?;
        r.max_offset_change = kv.get_or("reinit_offset", r.max_offset_change).map_err(cfg_err)?;

        c.grid.cols = kv.get_or("grid_cols", c.grid.cols).map_err(cfg_err)?;
        c.grid.rows = kv.get_or("grid_rows", c.grid.rows).map_err(cfg_err)?;

        let s = &mut c.stream;
        s.budget = RateBudget {
            pose_hz: kv.get_or("pose_hz", s.budget.pose_hz).map_err(cfg_err)?,
            cloud_hz: kv.get_or("cloud_hz", s.budget.cloud_hz).map_err(cfg_err)?,
            video_hz: kv.get_or("video_hz", s.budget.video_hz).map_err(cfg_err)?,
        };
        s.point_budget = kv.get_or("point_budget", s.point_budget).map_err(cfg_err)?;
        s.client_queue_bound = kv.get_or("client_queue_bound", s.client_queue_bound).map_err(cfg_err)?;
        c.listen = parsed("listen")?;

        if let Some(p) = path("output")? {
            c.output = p;
        } else {
            c.output = base.join("run");
        }
        c.run_name = parsed("run_name")?;
        c.ply_ascii = kv.get_or("ply_ascii", c.ply_ascii).map_err(cfg_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if ![1, 2, 4].contains(&self.divisor) {
            return bad(format!("divisor must be 1, 2 or 4, got {}", self.divisor));
        }
        if ![3, 5].contains(&self.engine.window_size) {
            return bad(format!("window must be 3 or 5, got {}", self.engine.window_size));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.mosaic_stride == 0 {
            return bad("mosaic_stride must be at least 1".into());
        }
        if self.input == InputMode::ReplayWithTrajectory && self.trajectory.is_none() {
            return bad("input = replay_with_trajectory needs a `trajectory` file".into());
        }
        if self.plane.source == PlaneSource::Ahrs && self.ahrs.is_none() {
            return bad("plane_source = ahrs needs an `ahrs` file".into());
        }
        if !(self.plane.threshold_factor > 0.0) || self.plane.max_iterations == 0 {
            return bad("ransac_threshold and ransac_iterations must be positive".into());
        }
        self.grid
            .validate(usize::MAX)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.stream.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.engine.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}
