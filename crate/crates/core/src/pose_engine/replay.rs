//! Trajectory and AHRS text formats, and the replay pose provider.
//!
//! Trajectory lines: `id timestamp r11 r12 r13 r21 r22 r23 r31 r32 r33 cx cy cz`
//! (camera-to-world rotation, row-major, meters). AHRS lines:
//! `timestamp roll pitch yaw` in degrees, with the camera-to-world rotation
//! `Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::PoseError;
use crate::camera::Pose as GenericPose;
use crate::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub id: u64,
    pub timestamp: f64,
    pub pose: Pose,
}

pub fn format_trajectory(records: &[TrajectoryRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        let r = rec.pose.rotation();
        let c = rec.pose.center();
        write!(out, "{} {:?}", rec.id, rec.timestamp).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                write!(out, " {:?}", r[(i, j)]).unwrap();
            }
        }
        writeln!(out, " {:?} {:?} {:?}", c.x, c.y, c.z).unwrap();
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<TrajectoryRecord>, PoseError> {
    let mut records = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| PoseError::TrajectoryFormat {
            line: index + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 14 {
            return Err(bad(&format!("expected 14 fields, found {}", fields.len())));
        }
        let id: u64 = fields[0].parse().map_err(|_| bad("invalid frame id"))?;
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("invalid number"))?;
        let rotation = Matrix3::from_row_slice(&nums[1..10]);
        let center = Vector3::new(nums[10], nums[11], nums[12]);
        let pose = GenericPose::new(rotation, center).map_err(|e| bad(&e.to_string()))?;
        if let Some(prev) = records.last().map(|r: &TrajectoryRecord| r.id) {
            if id <= prev {
                return Err(bad("frame ids must be strictly increasing"));
            }
        }
        records.push(TrajectoryRecord {
            id,
            timestamp: nums[0],
            pose,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AhrsSample {
    pub timestamp: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl AhrsSample {
    pub fn from_rotation(timestamp: f64, r: &Matrix3<f64>) -> Self {
        let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        Self {
            timestamp,
            roll: roll.to_degrees(),
            pitch: pitch.to_degrees(),
            yaw: yaw.to_degrees(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let (sr, cr) = self.roll.to_radians().sin_cos();
        let (sp, cp) = self.pitch.to_radians().sin_cos();
        let (sy, cy) = self.yaw.to_radians().sin_cos();
        let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
        rz * ry * rx
    }

    /// Gravity direction expressed in the camera frame.
    pub fn gravity_in_camera(&self) -> Vector3<f64> {
        self.rotation().tr_mul(&Vector3::new(0.0, 0.0, -1.0))
    }
}

pub fn format_ahrs(samples: &[AhrsSample]) -> String {
    let mut out = String::new();
    for s in samples {
        writeln!(out, "{:?} {:?} {:?} {:?}", s.timestamp, s.roll, s.pitch, s.yaw).unwrap();
    }
    out
}

pub fn parse_ahrs(text: &str) -> Result<Vec<AhrsSample>, PoseError> {
    let mut out = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| PoseError::TrajectoryFormat {
                line: index + 1,
                reason: "invalid AHRS number".into(),
            })?;
        if nums.len() != 4 {
            return Err(PoseError::TrajectoryFormat {
                line: index + 1,
                reason: format!("expected 4 AHRS fields, found {}", nums.len()),
            });
        }
        out.push(AhrsSample {
            timestamp: nums[0],
            roll: nums[1],
            pitch: nums[2],
            yaw: nums[3],
        });
    }
    Ok(out)
}

/// Sample closest in time to `timestamp`.
pub fn nearest_ahrs(samples: &[AhrsSample], timestamp: f64) -> Option<&AhrsSample> {
    samples.iter().min_by(|a, b| {
        (a.timestamp - timestamp)
            .abs()
            .total_cmp(&(b.timestamp - timestamp).abs())
    })
}

/// Serves precomputed poses by frame id.
#[derive(Debug, Clone, Default)]
pub struct ReplayProvider {
    poses: BTreeMap<u64, TrajectoryRecord>,
}

impl ReplayProvider {
    pub fn new(records: Vec<TrajectoryRecord>) -> Self {
        Self {
            poses: records.into_iter().map(|r| (r.id, r)).collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, PoseError> {
        let text = std::fs::read_to_string(path).map_err(|e| PoseError::Io(e.to_string()))?;
        Ok(Self::new(parse_trajectory(&text)?))
    }

    pub fn pose(&self, frame_id: u64) -> Result<Pose, PoseError> {
        self.poses
            .get(&frame_id)
            .map(|r| r.pose)
            .ok_or(PoseError::MissingPose(frame_id))
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Records in frame-id order.
    pub fn iter(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.poses.values()
    }
}

/// Convenience: replay provider from a trajectory file.
pub fn replay_poses(path: &Path) -> Result<ReplayProvider, PoseError> {
    ReplayProvider::from_file(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{nadir_rotation, rotation_from_axis_angle};

    fn records(n: u64) -> Vec<TrajectoryRecord> {
        (0..n)
            .map(|i| TrajectoryRecord {
                id: i,
                timestamp: i as f64 * 2.0,
                pose: Pose::new(
                    rotation_from_axis_angle(&Vector3::new(0.1 * i as f64, -0.3, 0.77)),
                    Vector3::new(i as f64 * 0.25, 1.0 / 3.0, 2.0),
                )
                .unwrap(),
            })
            .collect()
    }

    #[test]
    fn trajectory_text_round_trip_is_exact() {
        let recs = records(5);
        let parsed = parse_trajectory(&format_trajectory(&recs)).unwrap();
        assert_eq!(parsed, recs);
    }

    #[test]
    fn provider_yields_one_pose_per_frame_in_order() {
        let provider = ReplayProvider::new(records(4));
        let ids: Vec<u64> = provider.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        for id in 0..4 {
            assert!(provider.pose(id).is_ok());
        }
    }

    #[test]
    fn empty_trajectory_misses_first_frame() {
        let provider = ReplayProvider::new(parse_trajectory("").unwrap());
        assert_eq!(provider.pose(0), Err(PoseError::MissingPose(0)));
    }

    #[test]
    fn malformed_trajectory_lines() {
        assert!(matches!(
            parse_trajectory("0 0.0 1 0 0"),
            Err(PoseError::TrajectoryFormat { line: 1, .. })
        ));
        let bad_rotation = "0 0 2 0 0 0 1 0 0 0 1 0 0 0";
        assert!(parse_trajectory(bad_rotation).is_err());
    }

    #[test]
    fn ahrs_angles_round_trip() {
        let r = nadir_rotation::<f64>();
        let s = AhrsSample::from_rotation(0.0, &r);
        assert!((s.roll.abs() - 180.0).abs() < 1e-12);
        assert!(s.pitch.abs() < 1e-12 && s.yaw.abs() < 1e-12);
        assert!((s.rotation() - r).abs().max() < 1e-12);
        let g = s.gravity_in_camera();
        assert!((g - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);

        let r2 = rotation_from_axis_angle(&Vector3::new(0.2, -0.4, 1.1));
        let s2 = AhrsSample::from_rotation(1.0, &r2);
        assert!((s2.rotation() - r2).abs().max() < 1e-12);
        let parsed = parse_ahrs(&format_ahrs(&[s, s2])).unwrap();
        assert_eq!(parsed, vec![s, s2]);
    }
}
