use nalgebra::{Matrix3, Vector3};
use seamosaic_core::camera::rotation_from_axis_angle;
use seamosaic_core::evaluation::trajectory_similarity;
use seamosaic_core::pose_engine::replay::ReplayProvider;
use seamosaic_core::pose_engine::{EngineConfig, FrameStatus, PoseEngine, PoseError, PoseSource};
use seamosaic_core::synthetic::{
    comex_camera, render_sequence, RenderOptions, SceneSpec, SyntheticSequence, TrajectorySpec,
};
use seamosaic_core::Pose;

fn comex(frames: usize) -> SyntheticSequence {
    let traj = TrajectorySpec {
        max_frames: Some(frames),
        ..TrajectorySpec::comex()
    };
    render_sequence(&SceneSpec::comex(), &traj, &comex_camera(), RenderOptions::default()).unwrap()
}

fn run_vo(seq: &SyntheticSequence, config: EngineConfig) -> (PoseEngine, Vec<Option<Pose>>) {
    let mut engine = PoseEngine::new(*seq.camera(), config, PoseSource::VisualOdometry).unwrap();
    let mut poses = vec![None; seq.len()];
    for (k, rec) in seq.records.iter().enumerate() {
        let update = engine.process(rec.id, rec.timestamp, &seq.image(k)).unwrap();
        for (id, pose) in &update.refined_poses {
            poses[*id as usize] = Some(*pose);
        }
    }
    (engine, poses)
}

#[test]
fn vo_strip_matches_truth_up_to_similarity() {
    let seq = comex(12);
    let (_, poses) = run_vo(&seq, EngineConfig::default());
    let est: Vec<Pose> = poses.iter().map(|p| p.expect("every frame tracked")).collect();
    let truth: Vec<Pose> = seq.records.iter().map(|r| r.pose).collect();
    let report = trajectory_similarity(&est, &truth).unwrap();
    let altitude = seq.trajectory_spec.altitude;
    assert!(report.rms_3d < 1e-3 * altitude, "rms {}", report.rms_3d);
    // First baseline is unit length.
    assert!(((est[1].center() - est[0].center()).norm() - 1.0).abs() < 0.05);
}

#[test]
fn identical_frames_keep_the_pose() {
    let seq = comex(6);
    let mut engine = PoseEngine::new(*seq.camera(), EngineConfig::default(), PoseSource::VisualOdometry).unwrap();
    for k in 0..5 {
        engine.process(k as u64, k as f64, &seq.image(k)).unwrap();
    }
    let update = engine.process(5, 5.0, &seq.image(4)).unwrap();
    let pose = update.pose.unwrap();
    let last = engine.pose(4).unwrap();
    assert!((pose.center() - last.center()).norm() < 1e-6, "{}", (pose.center() - last.center()).norm());
    assert!((pose.rotation() - last.rotation()).norm() < 1e-6);
}

#[test]
fn pure_rotation_fails_initialization() {
    let seq = comex(1);
    let base = seq.records[0].pose;
    let mut engine = PoseEngine::new(*seq.camera(), EngineConfig::default(), PoseSource::VisualOdometry).unwrap();
    let mut result = Ok(());
    for k in 0..5 {
        let r: Matrix3<f64> = base.rotation() * rotation_from_axis_angle(&Vector3::new(0.0, 0.02 * k as f64, 0.0));
        let pose = Pose::from_rotation_nearest(r, *base.center());
        let img = seq.renderer().render(&pose, k);
        if let Err(e) = engine.process(k, k as f64, &img) {
            result = Err(e);
            break;
        }
    }
    assert!(matches!(result, Err(PoseError::InitializationFailed(_))), "{result:?}");
    assert!(engine.is_lost());
}

#[test]
fn unrelated_frame_loses_tracking_until_restart() {
    let seq = comex(8);
    let mut engine = PoseEngine::new(*seq.camera(), EngineConfig::default(), PoseSource::VisualOdometry).unwrap();
    for k in 0..6 {
        engine.process(k as u64, k as f64, &seq.image(k)).unwrap();
    }
    let far = Pose::from_rotation_nearest(*seq.records[0].pose.rotation(), Vector3::new(20.0, 0.0, 2.0));
    let img = seq.renderer().render(&far, 99);
    let err = engine.process(6, 6.0, &img).unwrap_err();
    assert!(matches!(err, PoseError::TrackingLost { frame: 6, .. }), "{err:?}");
    assert!(matches!(
        engine.process(7, 7.0, &seq.image(7)),
        Err(PoseError::TrackingLost { .. })
    ));
    engine.restart();
    let update = engine.process(8, 8.0, &seq.image(0)).unwrap();
    assert_eq!(update.status, FrameStatus::Pending);
}

#[test]
fn keyframes_are_window_centers_emitted_once() {
    let seq = comex(9);
    let cfg = EngineConfig {
        window_size: 3,
        ..EngineConfig::default()
    };
    let mut engine = PoseEngine::new(*seq.camera(), cfg, PoseSource::VisualOdometry).unwrap();
    let mut keys = Vec::new();
    for (k, rec) in seq.records.iter().enumerate() {
        let update = engine.process(rec.id, rec.timestamp, &seq.image(k)).unwrap();
        if let Some(kf) = update.keyframe {
            assert!(!kf.window_points.is_empty());
            keys.push(kf.frame_id);
        }
    }
    assert_eq!(keys, (1..8).collect::<Vec<u64>>());
}

#[test]
fn replay_tie_points_lie_on_the_floor() {
    let seq = comex(6);
    let provider = ReplayProvider::new(seq.records.clone());
    let mut engine = PoseEngine::new(*seq.camera(), EngineConfig::default(), PoseSource::Replay(provider)).unwrap();
    let (mut count, mut on_floor) = (0, 0);
    for (k, rec) in seq.records.iter().enumerate() {
        let update = engine.process(rec.id, rec.timestamp, &seq.image(k)).unwrap();
        assert_eq!(update.pose, Some(rec.pose));
        if let Some(kf) = update.keyframe {
            for p in &kf.window_points {
                count += 1;
                on_floor += usize::from(p.position.z.abs() < 1e-3);
            }
        }
    }
    // Isolated mismatches along the epipolar line survive two-view checks.
    assert!(count > 100);
    assert!(on_floor as f64 >= 0.99 * count as f64, "{on_floor}/{count}");
}

#[test]
fn replay_without_pose_is_an_error() {
    let seq = comex(3);
    let provider = ReplayProvider::new(seq.records[..2].to_vec());
    let mut engine = PoseEngine::new(*seq.camera(), EngineConfig::default(), PoseSource::Replay(provider)).unwrap();
    engine.process(0, 0.0, &seq.image(0)).unwrap();
    engine.process(1, 1.0, &seq.image(1)).unwrap();
    assert_eq!(engine.process(2, 2.0, &seq.image(2)).unwrap_err(), PoseError::MissingPose(2));
}
