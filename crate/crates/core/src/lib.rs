//! Real-time sequential image mosaicing for underwater navigation and mapping.
//!
//! The crate hosts the processing blocks of the mapping pipeline: camera
//! geometry, pose estimation (feature-based visual odometry with windowed
//! bundle adjustment, or replay of a known trajectory), local plane fitting,
//! incremental 2D mosaicing with world files, and incremental 3D planar point
//! cloud projection. A synthetic scene renderer provides ground truth.
//!
//! Geometry kernels are generic over [`Scalar`]; the aliases below fix the
//! pipeline's working precision to `f64`.

pub mod camera;
pub mod evaluation;
pub mod keyvalue;
pub mod mosaic;
pub mod plane;
pub mod raster;
pub mod pose_engine;
pub mod projection;
pub mod scalar;
pub mod similarity;
pub mod synthetic;

pub use scalar::Scalar;

pub type CameraModel = camera::CameraModel<f64>;
pub type DistortionCoefficients = camera::DistortionCoefficients<f64>;
pub type Pose = camera::Pose<f64>;
pub type PixelCoord = camera::PixelCoord<f64>;
pub type Ray = camera::Ray<f64>;
pub type Plane = plane::Plane<f64>;
pub type PlaneFitReport = plane::PlaneFitReport<f64>;

pub type CameraModelF32 = camera::CameraModel<f32>;
pub type PoseF32 = camera::Pose<f32>;
pub type PlaneF32 = plane::Plane<f32>;
