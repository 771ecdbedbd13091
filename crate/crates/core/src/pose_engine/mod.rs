//! Frame-to-frame pose estimation: feature tracking visual odometry with
//! sliding-window bundle adjustment, or replay of a known trajectory.

pub mod bundle;
pub mod engine;
pub mod epipolar;
pub mod features;
pub mod replay;
pub mod resection;
pub mod triangulate;

use thiserror::Error;

pub use engine::{
    select_keyframe, EngineConfig, Frame, FrameStatus, FrameUpdate, Keyframe, KeyframeGuard, PoseEngine, PoseSource,
    SlidingWindow, TiePoint,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("too few matches: {found} (need {required})")]
    TooFewMatches { found: usize, required: usize },
    #[error("initialization failed: {0}")]
    InitializationFailed(String),
    #[error("tracking lost at frame {frame}: {reason}")]
    TrackingLost { frame: u64, reason: String },
    #[error("bundle adjustment diverged after {rejections} rejected steps")]
    DivergedAdjustment { rejections: usize },
    #[error("no pose for frame {0}")]
    MissingPose(u64),
    #[error("trajectory line {line}: {reason}")]
    TrajectoryFormat { line: usize, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error: {0}")]
    Io(String),
}
