//! In-process fan-out of pipeline products to attached clients. The
//! producer only appends to per-client queues under a short lock and never
//! waits on a consumer.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use seamosaic_core::mosaic::MosaicEvent;
use seamosaic_core::projection::{CloudChunk, CloudPoint};
use seamosaic_core::Pose;

use crate::protocol::{
    AlertPayload, ClientCommand, CloudChunkPayload, Envelope, ErrorPayload, MosaicEventPayload, Payload, PointBlock,
    PosePayload, RestartAckPayload, SparsePointsPayload,
};
use crate::StreamError;

pub trait Clock: Send + Sync {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    t: Mutex<f64>,
}

impl ManualClock {
    pub fn new(t: f64) -> Self {
        Self { t: Mutex::new(t) }
    }

    pub fn set(&self, t: f64) {
        *self.t.lock().expect("clock lock") = t;
    }

    pub fn advance(&self, dt: f64) {
        *self.t.lock().expect("clock lock") += dt;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        *self.t.lock().expect("clock lock")
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now(&self) -> f64 {
        (**self).now()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBudget {
    pub pose_hz: f64,
    pub cloud_hz: f64,
    /// Reserved; no video is relayed.
    pub video_hz: f64,
}

impl Default for RateBudget {
    fn default() -> Self {
        Self {
            pose_hz: 5.0,
            cloud_hz: 0.5,
            video_hz: 10.0,
        }
    }
}

impl RateBudget {
    pub fn validate(&self) -> Result<(), StreamError> {
        for (name, v) in [("pose_hz", self.pose_hz), ("cloud_hz", self.cloud_hz), ("video_hz", self.video_hz)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(StreamError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HubConfig {
    pub budget: RateBudget,
    /// Live messages a client may have waiting before it is cut off.
    pub client_queue_bound: usize,
    /// Retained cloud points before the oldest chunks are decimated.
    pub point_budget: usize,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            budget: RateBudget::default(),
            client_queue_bound: 4096,
            point_budget: 5_000_000,
        }
    }
}

impl HubConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        self.budget.validate()?;
        if self.client_queue_bound == 0 {
            return Err(StreamError::Config("client_queue_bound must be at least 1".into()));
        }
        if self.point_budget == 0 {
            return Err(StreamError::Config("point_budget must be at least 1".into()));
        }
        Ok(())
    }
}

pub type ClientId = u64;

/// Requests forwarded to the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlEvent {
    RestartAcquisition { client: ClientId },
}

type Item = (Arc<Payload>, f64);

#[derive(Debug)]
struct ClientState {
    budget: RateBudget,
    urgent: VecDeque<Item>,
    queue: VecDeque<Item>,
    /// Leading entries of `queue` that came from a snapshot.
    snapshot_len: usize,
    pending_pose: Option<Item>,
    pending_sparse: Option<Item>,
    last_pose_sent: Option<f64>,
    last_sparse_sent: Option<f64>,
    sequence: u64,
    terminal: bool,
    closed: bool,
}

impl ClientState {
    fn new(budget: RateBudget) -> Self {
        Self {
            budget,
            urgent: VecDeque::new(),
            queue: VecDeque::new(),
            snapshot_len: 0,
            pending_pose: None,
            pending_sparse: None,
            last_pose_sent: None,
            last_sparse_sent: None,
            sequence: 0,
            terminal: false,
            closed: false,
        }
    }

    fn backlog(&self) -> usize {
        self.urgent.len() + self.queue.len() - self.snapshot_len
    }

    fn overflow(&mut self, bound: usize, now: f64) {
        self.urgent.clear();
        self.queue.clear();
        self.snapshot_len = 0;
        self.pending_pose = None;
        self.pending_sparse = None;
        self.terminal = true;
        let frame = Payload::Error(ErrorPayload {
            code: "client_overflow".into(),
            message: format!("more than {bound} messages waiting; disconnecting"),
            terminal: true,
        });
        self.urgent.push_back((Arc::new(frame), now));
    }

    fn due(last: Option<f64>, hz: f64, now: f64) -> bool {
        // Tolerate clock rounding at exact multiples of the period.
        last.is_none_or(|t| now - t >= 1.0 / hz - 1e-9)
    }

    /// Next deliverable item: urgent, then rate-limited latest values, then
    /// the cumulative queue.
    fn pop(&mut self, now: f64) -> Option<Item> {
        if let Some(item) = self.urgent.pop_front() {
            return Some(item);
        }
        if self.pending_pose.is_some() && Self::due(self.last_pose_sent, self.budget.pose_hz, now) {
            self.last_pose_sent = Some(now);
            return self.pending_pose.take();
        }
        if self.pending_sparse.is_some() && Self::due(self.last_sparse_sent, self.budget.pose_hz, now) {
            self.last_sparse_sent = Some(now);
            return self.pending_sparse.take();
        }
        let item = self.queue.pop_front()?;
        self.snapshot_len = self.snapshot_len.saturating_sub(1);
        Some(item)
    }

    /// Seconds until a held latest-value message becomes due.
    fn next_due(&self, now: f64) -> Option<f64> {
        let wait = |pending: bool, last: Option<f64>| {
            pending.then(|| last.map_or(0.0, |t| (t + 1.0 / self.budget.pose_hz - now).max(0.0)))
        };
        match (
            wait(self.pending_pose.is_some(), self.last_pose_sent),
            wait(self.pending_sparse.is_some(), self.last_sparse_sent),
        ) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[derive(Debug, Default)]
struct Retained {
    /// Cloud chunks and mosaic events in publication order.
    items: Vec<Item>,
    points: usize,
}

impl Retained {
    fn chunk_points(p: &Payload) -> usize {
        match p {
            Payload::CloudChunk(c) => c.points.count,
            _ => 0,
        }
    }

    fn push(&mut self, item: Item) {
        self.points += Self::chunk_points(&item.0);
        self.items.push(item);
    }

    /// Folds the oldest per-frame chunks, every other point kept, into one
    /// archive chunk per segment at the front of the list until the budget
    /// holds. Archives are thinned further once no frame chunk is left.
    fn enforce(&mut self, budget: usize) {
        while self.points > budget {
            let oldest = self
                .items
                .iter()
                .position(|(p, _)| matches!(&**p, Payload::CloudChunk(c) if c.frame_id.is_some()));
            match oldest {
                Some(i) => {
                    let (p, t) = self.items.remove(i);
                    let Payload::CloudChunk(c) = &*p else { unreachable!() };
                    self.points -= c.points.count;
                    let kept: Vec<CloudPoint> = decode_or_empty(&c.points).into_iter().step_by(2).collect();
                    self.merge_archive(c.segment_id, c.plane, kept, t);
                }
                None => {
                    let before = self.points;
                    for (p, _) in &mut self.items {
                        if let Payload::CloudChunk(c) = &**p {
                            let kept: Vec<CloudPoint> = decode_or_empty(&c.points).into_iter().step_by(2).collect();
                            self.points -= c.points.count - kept.len();
                            *p = Arc::new(Payload::CloudChunk(CloudChunkPayload {
                                points: PointBlock::encode(&kept),
                                ..c.clone()
                            }));
                        }
                    }
                    if self.points == before {
                        break;
                    }
                }
            }
        }
    }

    fn merge_archive(&mut self, segment_id: u64, plane: [f64; 4], mut points: Vec<CloudPoint>, t: f64) {
        let slot = self
            .items
            .iter()
            .position(|(p, _)| matches!(&**p, Payload::CloudChunk(c) if c.frame_id.is_none() && c.segment_id == segment_id));
        self.points += points.len();
        match slot {
            Some(i) => {
                let Payload::CloudChunk(c) = &*self.items[i].0 else { unreachable!() };
                let mut all = decode_or_empty(&c.points);
                all.append(&mut points);
                let merged = CloudChunkPayload {
                    points: PointBlock::encode(&all),
                    ..c.clone()
                };
                self.items[i].0 = Arc::new(Payload::CloudChunk(merged));
            }
            None => {
                let archive = CloudChunkPayload {
                    frame_id: None,
                    segment_id,
                    plane,
                    points: PointBlock::encode(&points),
                };
                let at = self
                    .items
                    .iter()
                    .take_while(|(p, _)| matches!(&**p, Payload::CloudChunk(c) if c.frame_id.is_none()))
                    .count();
                self.items.insert(at, (Arc::new(Payload::CloudChunk(archive)), t));
            }
        }
    }
}

fn decode_or_empty(block: &PointBlock) -> Vec<CloudPoint> {
    // Blocks are produced by this crate, so decoding cannot fail.
    block.decode().unwrap_or_default()
}

struct HubState {
    next_client: ClientId,
    clients: HashMap<ClientId, ClientState>,
    retained: Retained,
    latest_pose: Option<Item>,
    latest_sparse: Option<Item>,
    published: u64,
}

struct Inner {
    config: HubConfig,
    clock: Box<dyn Clock>,
    state: Mutex<HubState>,
    wake: Condvar,
    control: Mutex<Sender<ControlEvent>>,
    control_rx: Mutex<Option<Receiver<ControlEvent>>>,
}

/// Cheap to clone; all clones share the same session.
#[derive(Clone)]
pub struct Hub {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub").field("config", &self.inner.config).finish_non_exhaustive()
    }
}

impl Hub {
    pub fn new(config: HubConfig, clock: impl Clock + 'static) -> Result<Self, StreamError> {
        config.validate()?;
        let (tx, rx) = channel();
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                clock: Box::new(clock),
                state: Mutex::new(HubState {
                    next_client: 0,
                    clients: HashMap::new(),
                    retained: Retained::default(),
                    latest_pose: None,
                    latest_sparse: None,
                    published: 0,
                }),
                wake: Condvar::new(),
                control: Mutex::new(tx),
                control_rx: Mutex::new(Some(rx)),
            }),
        })
    }

    pub fn config(&self) -> &HubConfig {
        &self.inner.config
    }

    pub fn now(&self) -> f64 {
        self.inner.clock.now()
    }

    /// Receiver for restart requests; only the first call gets it.
    pub fn take_control_receiver(&self) -> Option<Receiver<ControlEvent>> {
        self.inner.control_rx.lock().expect("hub lock").take()
    }

    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.inner.state.lock().expect("hub lock")
    }

    pub fn connect(&self) -> ClientHandle {
        let mut st = self.lock();
        let id = st.next_client;
        st.next_client += 1;
        st.clients.insert(id, ClientState::new(self.inner.config.budget));
        ClientHandle { hub: self.clone(), id }
    }

    pub fn client_count(&self) -> usize {
        self.lock().clients.values().filter(|c| !c.closed).count()
    }

    pub fn retained_points(&self) -> usize {
        self.lock().retained.points
    }

    /// Total messages accepted from the producer.
    pub fn published_count(&self) -> u64 {
        self.lock().published
    }

    /// Fans a message out to every client. Error frames are per-client
    /// and cannot be published.
    pub fn publish(&self, payload: Payload) -> Result<(), StreamError> {
        let now = self.now();
        let bound = self.inner.config.client_queue_bound;
        let item: Item = (Arc::new(payload), now);
        let mut st = self.lock();
        match &*item.0 {
            Payload::Error(_) => return Err(StreamError::Protocol("error frames are not broadcast".into())),
            Payload::Pose(_) => {
                st.latest_pose = Some(item.clone());
                for c in st.clients.values_mut().filter(|c| !c.terminal) {
                    c.pending_pose = Some(item.clone());
                }
            }
            Payload::SparsePoints(_) => {
                st.latest_sparse = Some(item.clone());
                for c in st.clients.values_mut().filter(|c| !c.terminal) {
                    c.pending_sparse = Some(item.clone());
                }
            }
            Payload::Alert(_) | Payload::RestartAck(_) => {
                for c in st.clients.values_mut().filter(|c| !c.terminal) {
                    c.urgent.push_back(item.clone());
                    if c.backlog() > bound {
                        c.overflow(bound, now);
                    }
                }
            }
            Payload::CloudChunk(_) | Payload::MosaicEvent(_) => {
                st.retained.push(item.clone());
                st.retained.enforce(self.inner.config.point_budget);
                for c in st.clients.values_mut().filter(|c| !c.terminal) {
                    c.queue.push_back(item.clone());
                    if c.backlog() > bound {
                        log::warn!("stream client overflowed its queue; disconnecting");
                        c.overflow(bound, now);
                    }
                }
            }
        }
        st.published += 1;
        drop(st);
        self.inner.wake.notify_all();
        Ok(())
    }

    pub fn publish_pose(&self, frame_id: u64, pose: &Pose) -> Result<(), StreamError> {
        self.publish(Payload::Pose(PosePayload::from_pose(frame_id, pose)))
    }

    pub fn publish_sparse_points(&self, frame_id: u64, points: &[CloudPoint]) -> Result<(), StreamError> {
        self.publish(Payload::SparsePoints(SparsePointsPayload {
            frame_id,
            points: PointBlock::encode(points),
        }))
    }

    pub fn publish_chunk(&self, chunk: &CloudChunk) -> Result<(), StreamError> {
        self.publish(Payload::CloudChunk(CloudChunkPayload::from_chunk(chunk)))
    }

    pub fn publish_mosaic_event(&self, event: &MosaicEvent) -> Result<(), StreamError> {
        self.publish(Payload::MosaicEvent(MosaicEventPayload::from(event)))
    }

    pub fn publish_alert(&self, code: &str, frame_id: Option<u64>, message: &str) -> Result<(), StreamError> {
        self.publish(Payload::Alert(AlertPayload {
            code: code.into(),
            frame_id,
            message: message.into(),
        }))
    }

    pub fn publish_restart_ack(&self) -> Result<(), StreamError> {
        self.publish(Payload::RestartAck(RestartAckPayload { accepted: true }))
    }

    /// Wakes blocked receivers, e.g. after a manual clock moved.
    pub fn notify(&self) {
        self.inner.wake.notify_all();
    }

    fn command(&self, id: ClientId, command: ClientCommand) -> Result<(), StreamError> {
        match command {
            ClientCommand::RestartAcquisition => {
                let tx = self.inner.control.lock().expect("hub lock");
                // Nobody listening means no pipeline to restart; the ack
                // is still up to the pipeline.
                if tx.send(ControlEvent::RestartAcquisition { client: id }).is_err() {
                    log::warn!("restart requested but no pipeline is attached");
                }
            }
            ClientCommand::SetRate { pose_hz, cloud_hz } => {
                let budget = RateBudget {
                    pose_hz,
                    cloud_hz,
                    video_hz: self.inner.config.budget.video_hz,
                };
                budget.validate()?;
                if let Some(c) = self.lock().clients.get_mut(&id) {
                    c.budget = budget;
                }
            }
            ClientCommand::SnapshotRequest => {
                let mut st = self.lock();
                let retained: Vec<Item> = st.retained.items.clone();
                let (pose, sparse) = (st.latest_pose.clone(), st.latest_sparse.clone());
                if let Some(c) = st.clients.get_mut(&id) {
                    if !c.terminal {
                        // Everything still queued is part of the retained set.
                        c.queue = retained.into();
                        c.snapshot_len = c.queue.len();
                        c.pending_pose = pose;
                        c.pending_sparse = sparse;
                    }
                }
                drop(st);
                self.inner.wake.notify_all();
            }
        }
        Ok(())
    }

    fn push_error(&self, id: ClientId, code: &str, message: String) {
        let now = self.now();
        let mut st = self.lock();
        if let Some(c) = st.clients.get_mut(&id) {
            if !c.terminal {
                c.urgent.push_back((
                    Arc::new(Payload::Error(ErrorPayload {
                        code: code.into(),
                        message,
                        terminal: false,
                    })),
                    now,
                ));
            }
        }
        drop(st);
        self.inner.wake.notify_all();
    }

    fn take(&self, id: ClientId, st: &mut HubState) -> Result<Option<Envelope>, StreamError> {
        let now = self.now();
        let c = st.clients.get_mut(&id).ok_or(StreamError::Disconnected)?;
        if c.closed {
            return Err(StreamError::Disconnected);
        }
        let Some((payload, timestamp)) = c.pop(now) else {
            return Ok(None);
        };
        let env = Envelope {
            sequence: c.sequence,
            timestamp,
            payload: (*payload).clone(),
        };
        c.sequence += 1;
        if c.terminal && c.urgent.is_empty() {
            c.closed = true;
        }
        Ok(Some(env))
    }
}

/// Consumer end of one client. Dropping it detaches the client.
#[derive(Debug)]
pub struct ClientHandle {
    hub: Hub,
    id: ClientId,
}

impl ClientHandle {
    pub fn id(&self) -> ClientId {
        self.id
    }

    /// Next deliverable message, if any, without waiting.
    pub fn try_recv(&self) -> Result<Option<Envelope>, StreamError> {
        let mut st = self.hub.lock();
        self.hub.take(self.id, &mut st)
    }

    /// Waits up to `timeout` for a message. Rate-held messages become
    /// deliverable as the hub clock advances.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Envelope>, StreamError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.hub.lock();
        loop {
            if let Some(env) = self.hub.take(self.id, &mut st)? {
                return Ok(Some(env));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let mut wait = deadline - now;
            if let Some(due) = st.clients.get(&self.id).and_then(|c| c.next_due(self.hub.now())) {
                wait = wait.min(Duration::from_secs_f64(due.max(0.001)));
            }
            st = self.hub.inner.wake.wait_timeout(st, wait).expect("hub lock").0;
        }
    }

    pub fn command(&self, command: ClientCommand) -> Result<(), StreamError> {
        let result = self.hub.command(self.id, command);
        if let Err(e) = &result {
            self.hub.push_error(self.id, "invalid_command", e.to_string());
        }
        result
    }

    /// Parses and applies a raw command. Malformed input queues a
    /// non-terminal `unknown_command` error frame.
    pub fn handle_text(&self, text: &str) -> Result<(), StreamError> {
        match ClientCommand::from_json(text) {
            Ok(c) => self.command(c),
            Err(e) => {
                log::debug!("client {}: {e}", self.id);
                let shown: String = text.chars().take(80).collect();
                self.hub.push_error(self.id, "unknown_command", format!("unrecognized command {shown:?}"));
                Err(e)
            }
        }
    }
}

impl Drop for ClientHandle {
    fn drop(&mut self) {
        self.hub.lock().clients.remove(&self.id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::MessageKind;
    use nalgebra::Vector3;

    fn manual() -> (Arc<ManualClock>, Hub) {
        let clock = Arc::new(ManualClock::new(0.0));
        let hub = Hub::new(HubConfig::default(), clock.clone()).unwrap();
        (clock, hub)
    }

    fn drain(c: &ClientHandle) -> Vec<Envelope> {
        std::iter::from_fn(|| c.try_recv().ok().flatten()).collect()
    }

    fn chunk(frame_id: u64, n: usize) -> CloudChunk {
        CloudChunk {
            frame_id,
            segment_id: 0,
            points: (0..n)
                .map(|k| CloudPoint {
                    position: Vector3::new(k as f64, frame_id as f64, 0.0),
                    color: [1, 2, 3],
                })
                .collect(),
            plane: seamosaic_core::Plane::new(Vector3::z(), 0.0),
        }
    }

    #[test]
    fn pose_decimation_is_latest_wins() {
        let (clock, hub) = manual();
        let client = hub.connect();
        let mut got = Vec::new();
        for k in 0..50u64 {
            clock.set(k as f64 * 0.02);
            hub.publish_pose(k, &Pose::identity()).unwrap();
            got.extend(drain(&client));
        }
        clock.set(1.0);
        got.extend(drain(&client));
        assert!(got.len() <= 6, "{}", got.len());
        let Payload::Pose(last) = &got.last().unwrap().payload else { panic!() };
        assert_eq!(last.frame_id, 49);
        assert!(got.windows(2).all(|w| w[1].sequence > w[0].sequence));
    }

    #[test]
    fn alert_overtakes_queued_chunks() {
        let (_, hub) = manual();
        let client = hub.connect();
        for k in 0..100 {
            hub.publish_chunk(&chunk(k, 2)).unwrap();
        }
        hub.publish_alert("tracking_lost", Some(100), "lost").unwrap();
        let got = drain(&client);
        assert_eq!(got.len(), 101);
        assert_eq!(got[0].kind(), MessageKind::Alert);
        for (k, env) in got[1..].iter().enumerate() {
            let Payload::CloudChunk(c) = &env.payload else { panic!() };
            assert_eq!(c.frame_id, Some(k as u64));
        }
    }

    #[test]
    fn overflow_disconnects_with_terminal_frame() {
        let clock = Arc::new(ManualClock::new(0.0));
        let cfg = HubConfig {
            client_queue_bound: 3,
            ..HubConfig::default()
        };
        let hub = Hub::new(cfg, clock).unwrap();
        let slow = hub.connect();
        let fast = hub.connect();
        for k in 0..5 {
            hub.publish_chunk(&chunk(k, 1)).unwrap();
            assert_eq!(drain(&fast).len(), 1);
        }
        let got = drain(&slow);
        assert_eq!(got.len(), 1);
        let Payload::Error(e) = &got[0].payload else { panic!() };
        assert!(e.terminal);
        assert_eq!(e.code, "client_overflow");
        assert!(matches!(slow.try_recv(), Err(StreamError::Disconnected)));
        assert_eq!(hub.client_count(), 1);
    }

    #[test]
    fn snapshot_on_fresh_session_is_latest_pose_only() {
        let (_, hub) = manual();
        hub.publish_pose(3, &Pose::identity()).unwrap();
        let client = hub.connect();
        client.command(ClientCommand::SnapshotRequest).unwrap();
        let got = drain(&client);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].kind(), MessageKind::Pose);
    }

    #[test]
    fn malformed_command_keeps_connection() {
        let (_, hub) = manual();
        let client = hub.connect();
        assert!(client.handle_text("{\"v\":1,\"command\":\"dance\"}").is_err());
        let got = drain(&client);
        let Payload::Error(e) = &got[0].payload else { panic!() };
        assert_eq!(e.code, "unknown_command");
        assert!(!e.terminal);
        hub.publish_restart_ack().unwrap();
        assert_eq!(drain(&client)[0].kind(), MessageKind::RestartAck);
    }

    #[test]
    fn restart_is_forwarded() {
        let (_, hub) = manual();
        let rx = hub.take_control_receiver().unwrap();
        assert!(hub.take_control_receiver().is_none());
        let client = hub.connect();
        client.command(ClientCommand::RestartAcquisition).unwrap();
        assert_eq!(rx.try_recv().unwrap(), ControlEvent::RestartAcquisition { client: client.id() });
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let (_, hub) = manual();
        let client = hub.connect();
        assert!(client.command(ClientCommand::SetRate { pose_hz: 0.0, cloud_hz: 1.0 }).is_err());
        assert_eq!(drain(&client)[0].kind(), MessageKind::Error);
    }

    #[test]
    fn point_budget_builds_an_archive() {
        let clock = Arc::new(ManualClock::new(0.0));
        let cfg = HubConfig {
            point_budget: 25,
            ..HubConfig::default()
        };
        let hub = Hub::new(cfg, clock).unwrap();
        for k in 0..4 {
            hub.publish_chunk(&chunk(k, 10)).unwrap();
        }
        // 40 points: two oldest chunks fold to 5 + 5, leaving 30, then the third.
        assert!(hub.retained_points() <= 25);
        let client = hub.connect();
        client.command(ClientCommand::SnapshotRequest).unwrap();
        let got = drain(&client);
        let Payload::CloudChunk(first) = &got[0].payload else { panic!() };
        assert_eq!(first.frame_id, None);
        let total: usize = got
            .iter()
            .map(|e| match &e.payload {
                Payload::CloudChunk(c) => c.points.count,
                _ => 0,
            })
            .sum();
        assert_eq!(total, hub.retained_points());
        assert_eq!(total, 25);
    }
}
