//! End-to-end mapping runs: frames are acquired, posed, fitted with a local
//! plane, mosaiced and projected to a point cloud, with products written to
//! a run directory and streamed to viewers.

pub mod config;
pub mod report;
pub mod run;
pub mod source;

pub use config::{InputMode, PlaneSource, RunConfig};
pub use report::RunReport;
pub use run::{run, run_with_inputs, Inputs, RunOptions, RunOutput};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}
