//! Staged execution: acquisition, pose estimation, plane fitting, 2D
//! mosaicing and 3D projection each run on their own thread, connected by
//! bounded queues.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use image::RgbImage;
use nalgebra::Vector3;

use seamosaic_core::evaluation::{
    associate_markers, detect_markers, marker_similarity, trajectory_similarity, MarkerEstimate, MarkerSurvey,
};
use seamosaic_core::mosaic::{CloseReason, MosaicEvent, MosaicFrame, MosaicSegment, Mosaicker, PlaneFrame, WorldFile};
use seamosaic_core::plane::{
    horizontal_plane_from_ahrs, planarity_check, ransac_plane_fit_detailed, PlanarityVerdict, RansacPlaneParams,
};
use seamosaic_core::pose_engine::replay::{nearest_ahrs, parse_ahrs, AhrsSample, ReplayProvider, TrajectoryRecord};
use seamosaic_core::pose_engine::{FrameStatus, Keyframe, PoseEngine, PoseError, PoseSource};
use seamosaic_core::projection::{project_image_plane, CloudStore};
use seamosaic_core::raster::downscale;
use seamosaic_core::synthetic::texture::Marker;
use seamosaic_core::synthetic::{parse_markers, SyntheticSequence};
use seamosaic_core::{CameraModel, Plane, PlaneFitReport, Pose};
use seamosaic_stream::{ControlEvent, Hub, StreamServer, SystemClock};

use crate::config::{InputMode, PlaneSource, RunConfig};
use crate::report::{RunReport, StageTiming};
use crate::source::{DirectorySource, FrameSource, SequenceSource, SourceFrame};
use crate::PipelineError;

const QUEUE_DEPTH: usize = 2;
/// Smallest blob accepted as a marker, pixels.
const MARKER_MIN_PIXELS: usize = 20;

/// Everything a run reads besides the configuration.
pub struct Inputs {
    /// Camera at source resolution (before the divisor).
    pub camera: CameraModel,
    pub source: Box<dyn FrameSource>,
    pub replay: Option<ReplayProvider>,
    pub ahrs: Vec<AhrsSample>,
    pub markers: Option<Vec<Marker>>,
    pub truth: Option<Vec<TrajectoryRecord>>,
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))
}

impl Inputs {
    pub fn from_config(config: &RunConfig) -> Result<Self, PipelineError> {
        let camera = CameraModel::from_calibration_file(&config.camera)
            .map_err(|e| PipelineError::Input(format!("camera file {}: {e}", config.camera.display())))?;
        let mut source = DirectorySource::open(&config.images, config.fps)?;
        let replay = match &config.trajectory {
            Some(p) => Some(ReplayProvider::from_file(p).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?),
            None => None,
        };
        if let Some(r) = &replay {
            source = source.with_timestamps(r.iter().map(|t| (t.id, t.timestamp)).collect());
        }
        let replay = if config.input == InputMode::ReplayWithTrajectory { replay } else { None };
        let ahrs = match &config.ahrs {
            Some(p) => parse_ahrs(&read(p)?).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?,
            None => Vec::new(),
        };
        let markers = match &config.markers {
            Some(p) => Some(parse_markers(&read(p)?).map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?),
            None => None,
        };
        let truth = match &config.truth_trajectory {
            Some(p) => Some(
                seamosaic_core::pose_engine::replay::parse_trajectory(&read(p)?)
                    .map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?,
            ),
            None => None,
        };
        if let Some(n) = config.max_frames {
            source.truncate(n);
        }
        Ok(Self {
            camera,
            source: Box::new(source),
            replay,
            ahrs,
            markers,
            truth,
        })
    }

    /// In-memory synthetic input with its ground truth; `replay` feeds the
    /// true poses instead of running visual odometry.
    pub fn synthetic(sequence: &SyntheticSequence, replay: bool) -> Self {
        Self {
            camera: *sequence.camera(),
            replay: replay.then(|| ReplayProvider::new(sequence.records.clone())),
            ahrs: sequence.ahrs.clone(),
            markers: Some(sequence.markers().to_vec()),
            truth: Some(sequence.records.clone()),
            source: Box::new(SequenceSource::new(sequence.clone())),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip acquisition pacing.
    pub fast: bool,
    /// Terminate on tracking loss instead of waiting for a restart.
    pub batch: bool,
    /// Publish to this hub; with `listen` configured a new one is created.
    pub hub: Option<Hub>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSummary {
    pub id: u64,
    pub plane: Plane,
    pub frame: PlaneFrame,
    pub gsd: f64,
    pub frames: Vec<u64>,
    pub world_file: WorldFile,
    pub width: u32,
    pub height: u32,
}

impl SegmentSummary {
    fn of(seg: &MosaicSegment) -> Self {
        Self {
            id: seg.id,
            plane: seg.plane,
            frame: seg.frame,
            gsd: seg.gsd,
            frames: seg.frames.clone(),
            world_file: seg.world_file(),
            width: seg.canvas.width(),
            height: seg.canvas.height(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSummary {
    pub frame_id: u64,
    pub segment_id: u64,
    pub world_file: WorldFile,
    pub png: PathBuf,
}

/// Results kept in memory in addition to the files in `run_dir`.
#[derive(Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub run_dir: PathBuf,
    pub poses: BTreeMap<u64, Pose>,
    pub cloud: CloudStore,
    pub segments: Vec<SegmentSummary>,
    pub tiles: Vec<TileSummary>,
    pub markers: Vec<MarkerEstimate>,
}

struct KeyframeJob {
    keyframe: Keyframe,
    image: Arc<RgbImage>,
}

struct PlaneJob {
    keyframe: Keyframe,
    image: Arc<RgbImage>,
    plane: Plane,
    report: PlaneFitReport,
    inliers: Vec<Vector3<f64>>,
    scene_scale: f64,
}

struct ProjectionJob {
    job: PlaneJob,
    segment_id: u64,
}

enum Msg<T> {
    Item(T),
    /// Tracking was restarted; the map before this point is discarded.
    Restart,
}

fn stage_thread_err(name: &str) -> PipelineError {
    PipelineError::Internal(format!("{name} stage panicked"))
}

fn create_run_dir(config: &RunConfig) -> Result<PathBuf, PipelineError> {
    let name = config
        .run_name
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string());
    let io = |p: &Path, e: std::io::Error| PipelineError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(&config.output).map_err(|e| io(&config.output, e))?;
    let mut dir = config.output.join(&name);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = config.output.join(format!("{name}-{k}"));
    }
    for sub in ["segments", "tiles"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| io(&dir, e))?;
    }
    Ok(dir)
}

/// Reads inputs named by `config` and runs the pipeline. With `listen` set
/// the stream service is started for the duration of the run.
pub fn run(config: &RunConfig, mut options: RunOptions) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let inputs = Inputs::from_config(config)?;
    let mut server = None;
    if let Some(addr) = &config.listen {
        let hub = match options.hub.clone() {
            Some(h) => h,
            None => Hub::new(config.stream, SystemClock::new()).map_err(|e| PipelineError::Config(e.to_string()))?,
        };
        server = Some(StreamServer::bind(addr, hub.clone()).map_err(|e| PipelineError::Io(e.to_string()))?);
        options.hub = Some(hub);
    }
    let out = run_with_inputs(config, inputs, options);
    if let Some(s) = server {
        s.shutdown();
    }
    out
}

struct PoseStageOut {
    statuses: HashMap<u64, FrameStatus>,
    poses: BTreeMap<u64, Pose>,
    keyframes: usize,
    restarts: usize,
    terminated: bool,
    timing: StageTiming,
}

struct Shared<'a> {
    config: &'a RunConfig,
    camera: CameraModel,
    hub: Option<Hub>,
    stop: AtomicBool,
    run_dir: PathBuf,
    start: Instant,
}

impl Shared<'_> {
    fn publish(&self, f: impl FnOnce(&Hub) -> Result<(), seamosaic_stream::StreamError>) {
        if let Some(h) = &self.hub {
            if let Err(e) = f(h) {
                log::warn!("stream publish failed: {e}");
            }
        }
    }

    fn halt(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

pub fn run_with_inputs(config: &RunConfig, inputs: Inputs, options: RunOptions) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let Inputs {
        camera,
        mut source,
        replay,
        ahrs,
        markers,
        truth,
    } = inputs;
    if source.is_empty() {
        return Err(PipelineError::Input("the input holds no frames".into()));
    }
    if let Some(n) = config.max_frames {
        if n == 0 {
            return Err(PipelineError::Config("max_frames must be at least 1".into()));
        }
    }
    let camera = camera
        .downscaled(config.divisor)
        .map_err(|e| PipelineError::Config(format!("camera cannot be downscaled by {}: {e}", config.divisor)))?;
    let run_dir = create_run_dir(config)?;
    let interactive = options.hub.is_some() && !options.batch;
    let control = if interactive {
        options.hub.as_ref().and_then(Hub::take_control_receiver)
    } else {
        None
    };
    if interactive && control.is_none() {
        return Err(PipelineError::Config("the stream hub's control channel is already in use".into()));
    }
    let pose_source = match replay {
        Some(r) => PoseSource::Replay(r),
        None => PoseSource::VisualOdometry,
    };
    let mut engine_cfg = config.engine.clone();
    engine_cfg.seed = config.seed;
    let engine = PoseEngine::new(camera, engine_cfg, pose_source).map_err(|e| PipelineError::Config(e.to_string()))?;
    let shared = Shared {
        config,
        camera,
        hub: options.hub.clone(),
        stop: AtomicBool::new(false),
        run_dir: run_dir.clone(),
        start: Instant::now(),
    };
    let n_frames = config.max_frames.map_or(source.len(), |n| n.min(source.len()));

    let (frame_tx, frame_rx) = sync_channel::<Result<SourceFrame, PipelineError>>(QUEUE_DEPTH);
    let (kf_tx, kf_rx) = sync_channel::<Msg<KeyframeJob>>(QUEUE_DEPTH);
    let (plane_tx, plane_rx) = sync_channel::<Msg<PlaneJob>>(QUEUE_DEPTH);
    let (proj_tx, proj_rx) = sync_channel::<Msg<ProjectionJob>>(QUEUE_DEPTH);

    let result = std::thread::scope(|s| {
        let sh = &shared;
        let acq = s.spawn(move || acquisition_stage(sh, source.as_mut(), n_frames, options.fast, frame_tx));
        let pose = s.spawn(move || pose_stage(sh, engine, frame_rx, kf_tx, control));
        let plane = s.spawn(move || plane_stage(sh, &ahrs, kf_rx, plane_tx));
        let mosaic = s.spawn(move || mosaic_stage(sh, plane_rx, proj_tx));
        let markers_ref = markers.as_deref();
        let proj = s.spawn(move || projection_stage(sh, markers_ref.is_some(), proj_rx));
        let acq = acq.join().map_err(|_| stage_thread_err("acquisition"));
        let pose = pose.join().map_err(|_| stage_thread_err("pose"));
        let plane = plane.join().map_err(|_| stage_thread_err("plane"));
        let mosaic = mosaic.join().map_err(|_| stage_thread_err("mosaic"));
        let proj = proj.join().map_err(|_| stage_thread_err("projection"));
        (acq, pose, plane, mosaic, proj)
    });
    let (acq, pose, plane, mosaic, proj) = result;
    // Report the first real failure; later stages often fail only because an
    // earlier one stopped.
    let acq = acq??;
    let pose = pose??;
    let plane = plane??;
    let mosaic = mosaic??;
    let proj = proj??;
    let elapsed = shared.start.elapsed().as_secs_f64();

    let ply = run_dir.join("cloud.ply");
    proj.store
        .write_ply(&ply, config.ply_ascii)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", ply.display())))?;

    let mut report = RunReport {
        frames_processed: pose.statuses.len(),
        keyframes: pose.keyframes,
        planarity_skips: plane.skips,
        segments: mosaic.segments.len(),
        tiles: mosaic.tiles.len(),
        chunks: proj.store.chunks().len(),
        points: proj.store.point_count(),
        restarts: pose.restarts,
        terminated_on_loss: pose.terminated,
        elapsed_seconds: elapsed,
        ..RunReport::default()
    };
    for st in pose.statuses.values() {
        match st {
            FrameStatus::Tracked => report.frames_tracked += 1,
            FrameStatus::Lost => report.frames_lost += 1,
            FrameStatus::Pending => report.frames_pending += 1,
        }
    }
    report.pose_rate_hz = if elapsed > 0.0 { report.frames_tracked as f64 / elapsed } else { 0.0 };
    report.cloud_rate_hz = match (proj.chunk_times.first(), proj.chunk_times.last()) {
        (Some(a), Some(b)) if proj.chunk_times.len() > 1 && b > a => (proj.chunk_times.len() - 1) as f64 / (b - a),
        _ => 0.0,
    };
    report.timings.insert("acquisition".into(), acq);
    report.timings.insert("pose".into(), pose.timing);
    report.timings.insert("plane".into(), plane.timing);
    report.timings.insert("mosaic".into(), mosaic.timing);
    report.timings.insert("projection".into(), proj.timing);

    let estimates = proj.survey.map(|s| s.estimates()).unwrap_or_default();
    if let Some(truth) = &truth {
        let truth_poses: HashMap<u64, Pose> = truth.iter().map(|r| (r.id, r.pose)).collect();
        if let Some(markers) = &markers {
            let pairs = associate_markers(&estimates, markers, |id| truth_poses.get(&id).copied(), &camera);
            report.markers_matched = Some(pairs.len());
            if let Ok(sim) = marker_similarity(&pairs) {
                report.marker_rms = Some(sim.rms_3d);
            }
        }
        let (est, tru): (Vec<Pose>, Vec<Pose>) = pose
            .poses
            .iter()
            .filter_map(|(id, p)| truth_poses.get(id).map(|t| (*p, *t)))
            .unzip();
        if let Ok(sim) = trajectory_similarity(&est, &tru) {
            report.trajectory_rms = Some(sim.rms_3d);
        }
    }

    let write = |name: &str, text: String| {
        let p = run_dir.join(name);
        std::fs::write(&p, text).map_err(|e| PipelineError::Io(format!("{}: {e}", p.display())))
    };
    write("report.txt", report.to_text())?;
    write("manifest.txt", manifest(config, &camera, &mosaic.segments, &mosaic.tiles, &run_dir))?;
    log::info!(
        "run finished: {} frames, {} segments, {} chunks in {:.1} s",
        report.frames_processed,
        report.segments,
        report.chunks,
        elapsed
    );
    Ok(RunOutput {
        report,
        run_dir,
        poses: pose.poses,
        cloud: proj.store,
        segments: mosaic.segments,
        tiles: mosaic.tiles,
        markers: estimates,
    })
}

fn manifest(config: &RunConfig, camera: &CameraModel, segments: &[SegmentSummary], tiles: &[TileSummary], run_dir: &Path) -> String {
    let mut kv = seamosaic_core::keyvalue::KeyValues::default();
    kv.insert("input", format!("{:?}", config.input));
    kv.insert("divisor", config.divisor);
    kv.insert("window", config.engine.window_size);
    kv.insert("seed", config.seed);
    kv.insert("image_width", camera.width);
    kv.insert("image_height", camera.height);
    kv.insert("grid", format!("{}x{}", config.grid.cols, config.grid.rows));
    kv.insert("cloud", "cloud.ply");
    kv.insert("segments", segments.len());
    for s in segments {
        kv.insert(&format!("segment_{:03}", s.id), format!("segments/segment_{:03}.png {} frames", s.id, s.frames.len()));
    }
    kv.insert("tiles", tiles.len());
    let _ = run_dir;
    kv.to_text()
}

fn acquisition_stage(
    sh: &Shared,
    source: &mut dyn FrameSource,
    n: usize,
    fast: bool,
    tx: SyncSender<Result<SourceFrame, PipelineError>>,
) -> Result<StageTiming, PipelineError> {
    let mut timing = StageTiming::default();
    let fps = sh.config.fps;
    for i in 0..n {
        if sh.stopped() {
            break;
        }
        if !fast {
            let due = sh.start + Duration::from_secs_f64(i as f64 / fps);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        let t0 = Instant::now();
        let frame = source.frame(i).map(|mut f| {
            if sh.config.divisor > 1 {
                f.image = downscale(&f.image, sh.config.divisor);
            }
            f
        });
        timing.push(t0.elapsed().as_secs_f64());
        let failed = frame.is_err();
        if tx.send(frame).is_err() || failed {
            break;
        }
    }
    Ok(timing)
}

fn alert_code(e: &PoseError) -> &'static str {
    match e {
        PoseError::InitializationFailed(_) => "initialization_failed",
        PoseError::MissingPose(_) => "missing_pose",
        _ => "tracking_lost",
    }
}

/// Blocks until a restart request arrives or the run is stopped.
fn wait_for_restart(sh: &Shared, control: &Receiver<ControlEvent>) -> bool {
    loop {
        if sh.stopped() {
            return false;
        }
        match control.recv_timeout(Duration::from_millis(50)) {
            Ok(ControlEvent::RestartAcquisition { .. }) => return true,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return false,
        }
    }
}

fn pose_stage(
    sh: &Shared,
    mut engine: PoseEngine,
    rx: Receiver<Result<SourceFrame, PipelineError>>,
    tx: SyncSender<Msg<KeyframeJob>>,
    control: Option<Receiver<ControlEvent>>,
) -> Result<PoseStageOut, PipelineError> {
    let mut out = PoseStageOut {
        statuses: HashMap::new(),
        poses: BTreeMap::new(),
        keyframes: 0,
        restarts: 0,
        terminated: false,
        timing: StageTiming::default(),
    };
    let keep = sh.config.engine.window_size + 2;
    let mut images: VecDeque<(u64, Arc<RgbImage>)> = VecDeque::new();
    let mut admitted = 0usize;
    let fail = |e: PipelineError| {
        sh.halt();
        Err(e)
    };
    for frame in rx {
        let frame = match frame {
            Ok(f) => f,
            Err(e) => return fail(e),
        };
        let image = Arc::new(frame.image);
        images.push_back((frame.id, image.clone()));
        while images.len() > keep {
            images.pop_front();
        }
        let t0 = Instant::now();
        let result = engine.process(frame.id, frame.timestamp, &image);
        out.timing.push(t0.elapsed().as_secs_f64());
        match result {
            Ok(update) => {
                out.statuses.insert(frame.id, update.status);
                for (id, pose) in &update.refined_poses {
                    out.poses.insert(*id, *pose);
                    out.statuses.insert(*id, FrameStatus::Tracked);
                }
                if let Some(pose) = &update.pose {
                    sh.publish(|h| h.publish_pose(frame.id, pose));
                }
                if let Some(kf) = update.keyframe {
                    out.keyframes += 1;
                    let pts: Vec<_> = kf
                        .window_points
                        .iter()
                        .map(|t| seamosaic_core::projection::CloudPoint {
                            position: t.position,
                            color: t.color,
                        })
                        .collect();
                    sh.publish(|h| h.publish_sparse_points(kf.frame_id, &pts));
                    let stride = sh.config.mosaic_stride;
                    let forward = admitted % stride == 0;
                    admitted += 1;
                    if forward {
                        let Some((_, img)) = images.iter().find(|(id, _)| *id == kf.frame_id) else {
                            return fail(PipelineError::Internal(format!("image of keyframe {} not buffered", kf.frame_id)));
                        };
                        let job = KeyframeJob {
                            keyframe: kf,
                            image: img.clone(),
                        };
                        if tx.send(Msg::Item(job)).is_err() {
                            break;
                        }
                    }
                }
            }
            Err(e) => {
                out.statuses.insert(frame.id, FrameStatus::Lost);
                log::warn!("frame {}: {e}", frame.id);
                sh.publish(|h| h.publish_alert(alert_code(&e), Some(frame.id), &e.to_string()));
                let restarted = control.as_ref().is_some_and(|c| wait_for_restart(sh, c));
                if !restarted {
                    out.terminated = true;
                    sh.halt();
                    break;
                }
                engine.restart();
                admitted = 0;
                out.restarts += 1;
                if tx.send(Msg::Restart).is_err() {
                    break;
                }
                sh.publish(|h| h.publish_restart_ack());
            }
        }
    }
    Ok(out)
}

struct PlaneStageOut {
    skips: usize,
    timing: StageTiming,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

/// Local plane of one keyframe, oriented toward the window cameras, with
/// the median camera-to-plane distance as scene scale.
fn fit_plane(sh: &Shared, ahrs: &[AhrsSample], kf: &Keyframe) -> Result<Option<(Plane, PlaneFitReport, Vec<Vector3<f64>>, f64)>, String> {
    let points: Vec<Vector3<f64>> = kf.window_points.iter().map(|t| t.position).collect();
    let centers: Vec<Vector3<f64>> = if kf.window_poses.is_empty() {
        vec![*kf.pose.center()]
    } else {
        kf.window_poses.iter().map(|(_, p)| *p.center()).collect()
    };
    let rough = median(points.iter().map(|p| (p - kf.pose.center()).norm()).collect()).ok_or("no tie points")?;
    let cfg = &sh.config.plane;
    let params = RansacPlaneParams {
        threshold: cfg.threshold_factor * rough,
        max_iterations: cfg.max_iterations,
        ..RansacPlaneParams::for_scene(rough, points.len(), sh.config.seed ^ kf.frame_id)
    };
    let (plane, report, inliers) = match cfg.source {
        PlaneSource::Ransac => {
            let fit = ransac_plane_fit_detailed(&points, &params).map_err(|e| e.to_string())?;
            let inliers: Vec<Vector3<f64>> = fit.inliers.iter().map(|&i| points[i]).collect();
            (fit.plane, fit.report, inliers)
        }
        PlaneSource::Ahrs => {
            let sample = nearest_ahrs(ahrs, kf.timestamp).ok_or("no AHRS sample")?;
            let gravity = kf.pose.rotation() * sample.gravity_in_camera();
            let plane = horizontal_plane_from_ahrs(&points, &gravity).map_err(|e| e.to_string())?;
            let inliers: Vec<Vector3<f64>> = points
                .iter()
                .copied()
                .filter(|p| plane.signed_distance(p).abs() <= params.threshold)
                .collect();
            let rms = if inliers.is_empty() {
                0.0
            } else {
                (inliers.iter().map(|p| plane.signed_distance(p).powi(2)).sum::<f64>() / inliers.len() as f64).sqrt()
            };
            let report = PlaneFitReport {
                inlier_count: inliers.len(),
                total_count: points.len(),
                rms_residual: rms,
                normal: *plane.normal(),
            };
            (plane, report, inliers)
        }
    };
    let plane = plane.oriented_toward(&centers);
    let report = PlaneFitReport {
        normal: *plane.normal(),
        ..report
    };
    let scale = median(centers.iter().map(|c| plane.signed_distance(c).abs()).collect()).ok_or("no cameras")?;
    match planarity_check(&report, scale, &cfg.planarity) {
        PlanarityVerdict::Accept => Ok(Some((plane, report, inliers, scale))),
        PlanarityVerdict::SkipProjection => Ok(None),
    }
}

fn plane_stage(
    sh: &Shared,
    ahrs: &[AhrsSample],
    rx: Receiver<Msg<KeyframeJob>>,
    tx: SyncSender<Msg<PlaneJob>>,
) -> Result<PlaneStageOut, PipelineError> {
    let mut out = PlaneStageOut {
        skips: 0,
        timing: StageTiming::default(),
    };
    for msg in rx {
        let job = match msg {
            Msg::Item(job) => job,
            Msg::Restart => {
                if tx.send(Msg::Restart).is_err() {
                    break;
                }
                continue;
            }
        };
        let t0 = Instant::now();
        let fit = fit_plane(sh, ahrs, &job.keyframe);
        out.timing.push(t0.elapsed().as_secs_f64());
        match fit {
            Ok(Some((plane, report, inliers, scene_scale))) => {
                let next = PlaneJob {
                    keyframe: job.keyframe,
                    image: job.image,
                    plane,
                    report,
                    inliers,
                    scene_scale,
                };
                if tx.send(Msg::Item(next)).is_err() {
                    break;
                }
            }
            Ok(None) => {
                log::info!("keyframe {}: scene not planar, projection skipped", job.keyframe.frame_id);
                out.skips += 1;
            }
            Err(e) => {
                log::warn!("keyframe {}: plane fit failed: {e}", job.keyframe.frame_id);
                out.skips += 1;
            }
        }
    }
    Ok(out)
}

struct MosaicStageOut {
    segments: Vec<SegmentSummary>,
    tiles: Vec<TileSummary>,
    timing: StageTiming,
}

fn mosaic_stage(sh: &Shared, rx: Receiver<Msg<PlaneJob>>, tx: SyncSender<Msg<ProjectionJob>>) -> Result<MosaicStageOut, PipelineError> {
    let mut mosaicker = Mosaicker::new(sh.config.mosaic.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut out = MosaicStageOut {
        segments: Vec::new(),
        tiles: Vec::new(),
        timing: StageTiming::default(),
    };
    let seg_dir = sh.run_dir.join("segments");
    let tile_dir = sh.run_dir.join("tiles");
    let io = |e: seamosaic_core::mosaic::MosaicError| {
        sh.halt();
        PipelineError::Io(e.to_string())
    };
    let flush = |m: &mut Mosaicker, out: &mut MosaicStageOut| -> Result<(), PipelineError> {
        for seg in m.take_completed() {
            seg.write(&seg_dir).map_err(io)?;
            out.segments.push(SegmentSummary::of(&seg));
        }
        Ok(())
    };
    let publish = |events: &[MosaicEvent]| {
        for e in events {
            sh.publish(|h| h.publish_mosaic_event(e));
        }
    };
    for msg in rx {
        let job = match msg {
            Msg::Item(job) => job,
            Msg::Restart => {
                publish(&mosaicker.close_current(CloseReason::Restart).into_iter().collect::<Vec<_>>());
                flush(&mut mosaicker, &mut out)?;
                if tx.send(Msg::Restart).is_err() {
                    break;
                }
                continue;
            }
        };
        let t0 = Instant::now();
        let window_poses: Vec<Pose> = job.keyframe.window_poses.iter().map(|(_, p)| *p).collect();
        let frame = MosaicFrame {
            frame_id: job.keyframe.frame_id,
            image: &job.image,
            pose: &job.keyframe.pose,
            camera: &sh.camera,
            plane: &job.plane,
            report: &job.report,
            inliers: &job.inliers,
            scene_scale: job.scene_scale,
            window_poses: &window_poses,
        };
        let step = match mosaicker.submit(&frame) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("keyframe {}: mosaicing failed: {e}", job.keyframe.frame_id);
                out.timing.push(t0.elapsed().as_secs_f64());
                continue;
            }
        };
        flush(&mut mosaicker, &mut out)?;
        if let Some(tile) = &step.tile {
            let stem = format!("tile_{:06}", tile.frame_id);
            tile.write(&tile_dir, &stem).map_err(io)?;
            out.tiles.push(TileSummary {
                frame_id: tile.frame_id,
                segment_id: step.segment_id,
                world_file: tile.world_file(),
                png: tile_dir.join(format!("{stem}.png")),
            });
        }
        out.timing.push(t0.elapsed().as_secs_f64());
        publish(&step.events);
        let next = ProjectionJob {
            job,
            segment_id: step.segment_id,
        };
        if tx.send(Msg::Item(next)).is_err() {
            break;
        }
    }
    let (rest, event) = mosaicker.finish();
    publish(&event.into_iter().collect::<Vec<_>>());
    for seg in rest {
        seg.write(&seg_dir).map_err(io)?;
        out.segments.push(SegmentSummary::of(&seg));
    }
    Ok(out)
}

struct ProjectionStageOut {
    store: CloudStore,
    survey: Option<MarkerSurvey>,
    chunk_times: Vec<f64>,
    timing: StageTiming,
}

fn projection_stage(sh: &Shared, survey_markers: bool, rx: Receiver<Msg<ProjectionJob>>) -> Result<ProjectionStageOut, PipelineError> {
    let mut out = ProjectionStageOut {
        store: CloudStore::new(),
        survey: survey_markers.then(MarkerSurvey::new),
        chunk_times: Vec::new(),
        timing: StageTiming::default(),
    };
    for msg in rx {
        let ProjectionJob { job, segment_id } = match msg {
            Msg::Item(j) => j,
            Msg::Restart => continue,
        };
        let kf = &job.keyframe;
        let t0 = Instant::now();
        let chunk = project_image_plane(kf.frame_id, segment_id, &job.image, &kf.pose, &sh.camera, &job.plane, &sh.config.grid);
        out.timing.push(t0.elapsed().as_secs_f64());
        match chunk {
            Ok(chunk) => {
                sh.publish(|h| h.publish_chunk(&chunk));
                if let Err(e) = out.store.accumulate(chunk) {
                    log::warn!("keyframe {}: {e}", kf.frame_id);
                } else {
                    out.chunk_times.push(sh.start.elapsed().as_secs_f64());
                }
            }
            Err(e) => log::warn!("keyframe {}: projection skipped: {e}", kf.frame_id),
        }
        if let Some(survey) = &mut out.survey {
            let obs = detect_markers(&job.image, MARKER_MIN_PIXELS);
            survey.add(kf.frame_id, &obs, &kf.pose, &sh.camera, &job.plane);
        }
    }
    Ok(out)
}
