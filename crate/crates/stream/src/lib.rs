//! Live distribution of mapping products to operator viewers.
//!
//! [`Hub`] fans pose, sparse point, cloud chunk, mosaic and alert messages
//! out to attached clients with per-kind delivery rules, and
//! [`StreamServer`] exposes it over WebSocket using the JSON envelope in
//! [`protocol`].

pub mod hub;
pub mod protocol;
pub mod server;
pub mod transcript;

pub use hub::{ClientHandle, Clock, ControlEvent, Hub, HubConfig, ManualClock, RateBudget, SystemClock};
pub use protocol::{ClientCommand, Envelope, MessageKind, Payload};
pub use server::StreamServer;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StreamError {
    #[error("invalid stream configuration: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown command: {0}")]
    UnknownCommand(String),
    #[error("client disconnected")]
    Disconnected,
    #[error("i/o error: {0}")]
    Io(String),
}
