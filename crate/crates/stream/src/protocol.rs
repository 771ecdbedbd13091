//! JSON wire format. Every server frame is an envelope
//! `{"v", "kind", "sequence", "timestamp", "payload"}`; clients send
//! `{"v", "command", ...}` objects.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use seamosaic_core::mosaic::MosaicEvent;
use seamosaic_core::projection::{CloudChunk, CloudPoint};
use seamosaic_core::{Plane, Pose};

use crate::StreamError;

pub const PROTOCOL_VERSION: u32 = 1;

/// Bytes per encoded point: three little-endian f64 then r, g, b.
pub const POINT_RECORD_BYTES: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Pose,
    SparsePoints,
    CloudChunk,
    MosaicEvent,
    Alert,
    RestartAck,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        Self::Pose,
        Self::SparsePoints,
        Self::CloudChunk,
        Self::MosaicEvent,
        Self::Alert,
        Self::RestartAck,
        Self::Error,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pose => "pose",
            Self::SparsePoints => "sparse_points",
            Self::CloudChunk => "cloud_chunk",
            Self::MosaicEvent => "mosaic_event",
            Self::Alert => "alert",
            Self::RestartAck => "restart_ack",
            Self::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Kinds delivered exactly once and in order to every attached client.
    pub fn is_lossless(&self) -> bool {
        matches!(self, Self::CloudChunk | Self::MosaicEvent | Self::Alert | Self::RestartAck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePayload {
    pub frame_id: u64,
    /// Camera center in world coordinates.
    pub position: [f64; 3],
    /// Camera-to-world rotation, row-major.
    pub rotation: [f64; 9],
}

impl PosePayload {
    pub fn from_pose(frame_id: u64, pose: &Pose) -> Self {
        let r = pose.rotation();
        let c = pose.center();
        Self {
            frame_id,
            position: [c.x, c.y, c.z],
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
        }
    }
}

/// Colored points packed as base64 of [`POINT_RECORD_BYTES`]-byte records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointBlock {
    pub count: usize,
    pub data: String,
}

impl PointBlock {
    pub fn encode(points: &[CloudPoint]) -> Self {
        let mut bytes = Vec::with_capacity(points.len() * POINT_RECORD_BYTES);
        for p in points {
            for v in [p.position.x, p.position.y, p.position.z] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&p.color);
        }
        Self {
            count: points.len(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<CloudPoint>, StreamError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| StreamError::Protocol(format!("point data: {e}")))?;
        if bytes.len() != self.count * POINT_RECORD_BYTES {
            return Err(StreamError::Protocol(format!(
                "point data holds {} bytes, expected {} for {} points",
                bytes.len(),
                self.count * POINT_RECORD_BYTES,
                self.count
            )));
        }
        Ok(bytes
            .chunks_exact(POINT_RECORD_BYTES)
            .map(|r| {
                let f = |k: usize| f64::from_le_bytes(r[8 * k..8 * k + 8].try_into().expect("8 bytes"));
                CloudPoint {
                    position: nalgebra::Vector3::new(f(0), f(1), f(2)),
                    color: [r[24], r[25], r[26]],
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsePointsPayload {
    pub frame_id: u64,
    pub points: PointBlock,
}

fn plane_array(plane: &Plane) -> [f64; 4] {
    let n = plane.normal();
    [n.x, n.y, n.z, plane.offset()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudChunkPayload {
    /// `None` for an archive chunk that merges decimated older chunks.
    pub frame_id: Option<u64>,
    pub segment_id: u64,
    /// `[nx, ny, nz, d]` with `n . x = d` on the plane.
    pub plane: [f64; 4],
    pub points: PointBlock,
}

impl CloudChunkPayload {
    pub fn from_chunk(chunk: &CloudChunk) -> Self {
        Self {
            frame_id: Some(chunk.frame_id),
            segment_id: chunk.segment_id,
            plane: plane_array(&chunk.plane),
            points: PointBlock::encode(&chunk.points),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MosaicEventPayload {
    SegmentStarted { segment_id: u64, plane: [f64; 4], gsd: f64 },
    TileAdded { segment_id: u64, frame_id: u64, width: u32, height: u32 },
    SegmentClosed { segment_id: u64, frames: usize, reason: String },
}

impl From<&MosaicEvent> for MosaicEventPayload {
    fn from(e: &MosaicEvent) -> Self {
        match e {
            MosaicEvent::SegmentStarted { segment_id, plane, gsd } => Self::SegmentStarted {
                segment_id: *segment_id,
                plane: plane_array(plane),
                gsd: *gsd,
            },
            MosaicEvent::TileAdded { segment_id, frame_id, width, height } => Self::TileAdded {
                segment_id: *segment_id,
                frame_id: *frame_id,
                width: *width,
                height: *height,
            },
            MosaicEvent::SegmentClosed { segment_id, frames, reason } => Self::SegmentClosed {
                segment_id: *segment_id,
                frames: *frames,
                reason: reason.as_str().to_string(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertPayload {
    /// `tracking_lost`, `initialization_failed`, ...
    pub code: String,
    pub frame_id: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartAckPayload {
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    /// `unknown_command` or `client_overflow`.
    pub code: String,
    pub message: String,
    /// The server closes the connection after a terminal error.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Pose(PosePayload),
    SparsePoints(SparsePointsPayload),
    CloudChunk(CloudChunkPayload),
    MosaicEvent(MosaicEventPayload),
    Alert(AlertPayload),
    RestartAck(RestartAckPayload),
    Error(ErrorPayload),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Pose(_) => MessageKind::Pose,
            Self::SparsePoints(_) => MessageKind::SparsePoints,
            Self::CloudChunk(_) => MessageKind::CloudChunk,
            Self::MosaicEvent(_) => MessageKind::MosaicEvent,
            Self::Alert(_) => MessageKind::Alert,
            Self::RestartAck(_) => MessageKind::RestartAck,
            Self::Error(_) => MessageKind::Error,
        }
    }

    fn to_value(&self) -> Value {
        let v = match self {
            Self::Pose(p) => serde_json::to_value(p),
            Self::SparsePoints(p) => serde_json::to_value(p),
            Self::CloudChunk(p) => serde_json::to_value(p),
            Self::MosaicEvent(p) => serde_json::to_value(p),
            Self::Alert(p) => serde_json::to_value(p),
            Self::RestartAck(p) => serde_json::to_value(p),
            Self::Error(p) => serde_json::to_value(p),
        };
        v.expect("payloads serialize")
    }

    fn from_value(kind: MessageKind, value: Value) -> Result<Self, serde_json::Error> {
        Ok(match kind {
            MessageKind::Pose => Self::Pose(serde_json::from_value(value)?),
            MessageKind::SparsePoints => Self::SparsePoints(serde_json::from_value(value)?),
            MessageKind::CloudChunk => Self::CloudChunk(serde_json::from_value(value)?),
            MessageKind::MosaicEvent => Self::MosaicEvent(serde_json::from_value(value)?),
            MessageKind::Alert => Self::Alert(serde_json::from_value(value)?),
            MessageKind::RestartAck => Self::RestartAck(serde_json::from_value(value)?),
            MessageKind::Error => Self::Error(serde_json::from_value(value)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub sequence: u64,
    pub timestamp: f64,
    pub payload: Payload,
}

#[derive(Serialize, Deserialize)]
struct RawEnvelope {
    v: u32,
    kind: String,
    sequence: u64,
    timestamp: f64,
    payload: Value,
}

impl Envelope {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    pub fn to_json(&self) -> String {
        let raw = RawEnvelope {
            v: PROTOCOL_VERSION,
            kind: self.kind().as_str().to_string(),
            sequence: self.sequence,
            timestamp: self.timestamp,
            payload: self.payload.to_value(),
        };
        serde_json::to_string(&raw).expect("envelope serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, StreamError> {
        let raw: RawEnvelope = serde_json::from_str(text).map_err(|e| StreamError::Protocol(e.to_string()))?;
        if raw.v != PROTOCOL_VERSION {
            return Err(StreamError::Protocol(format!("unsupported protocol version {}", raw.v)));
        }
        let kind = MessageKind::parse(&raw.kind).ok_or_else(|| StreamError::Protocol(format!("unknown kind {:?}", raw.kind)))?;
        let payload = Payload::from_value(kind, raw.payload)
            .map_err(|e| StreamError::Protocol(format!("{} payload: {e}", kind.as_str())))?;
        Ok(Self {
            sequence: raw.sequence,
            timestamp: raw.timestamp,
            payload,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ClientCommand {
    RestartAcquisition,
    SetRate { pose_hz: f64, cloud_hz: f64 },
    SnapshotRequest,
}

#[derive(Serialize, Deserialize)]
struct RawCommand {
    v: u32,
    #[serde(flatten)]
    command: ClientCommand,
}

impl ClientCommand {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&RawCommand {
            v: PROTOCOL_VERSION,
            command: self.clone(),
        })
        .expect("command serializes")
    }

    /// Fails with [`StreamError::UnknownCommand`] on anything unrecognized.
    pub fn from_json(text: &str) -> Result<Self, StreamError> {
        let raw: RawCommand = serde_json::from_str(text).map_err(|e| StreamError::UnknownCommand(e.to_string()))?;
        if raw.v != PROTOCOL_VERSION {
            return Err(StreamError::UnknownCommand(format!("unsupported protocol version {}", raw.v)));
        }
        Ok(raw.command)
    }
}
