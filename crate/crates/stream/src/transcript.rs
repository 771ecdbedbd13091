//! Recorded sessions as JSON lines, and the cumulative state a client
//! builds from them.

use std::collections::BTreeMap;

use crate::protocol::{AlertPayload, CloudChunkPayload, Envelope, MosaicEventPayload, Payload, PosePayload};
use crate::StreamError;

pub fn write_transcript(messages: &[Envelope]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&m.to_json());
        out.push('\n');
    }
    out
}

pub fn read_transcript(text: &str) -> Result<Vec<Envelope>, StreamError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| Envelope::from_json(l).map_err(|e| StreamError::Protocol(format!("line {}: {e}", k + 1))))
        .collect()
}

/// What a viewer accumulates. Chunks are keyed by frame, so a snapshot
/// replayed over already received chunks changes nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CumulativeState {
    pub chunks: BTreeMap<(u64, Option<u64>), CloudChunkPayload>,
    pub mosaic_events: Vec<MosaicEventPayload>,
    pub alerts: Vec<AlertPayload>,
    pub latest_pose: Option<PosePayload>,
    pub restart_acks: usize,
}

impl CumulativeState {
    pub fn apply(&mut self, env: &Envelope) {
        match &env.payload {
            Payload::CloudChunk(c) => {
                self.chunks.insert((c.segment_id, c.frame_id), c.clone());
            }
            Payload::MosaicEvent(e) => {
                if !self.mosaic_events.contains(e) {
                    self.mosaic_events.push(e.clone());
                }
            }
            Payload::Alert(a) => self.alerts.push(a.clone()),
            Payload::Pose(p) => self.latest_pose = Some(p.clone()),
            Payload::RestartAck(_) => self.restart_acks += 1,
            Payload::SparsePoints(_) | Payload::Error(_) => {}
        }
    }

    pub fn fold<'a>(messages: impl IntoIterator<Item = &'a Envelope>) -> Self {
        let mut s = Self::default();
        for m in messages {
            s.apply(m);
        }
        s
    }

    pub fn point_count(&self) -> usize {
        self.chunks.values().map(|c| c.points.count).sum()
    }
}
