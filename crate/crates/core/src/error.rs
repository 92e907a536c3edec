//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration file could not be parsed or violates an invariant.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes are inconsistent at a graph node.
    #[error("shape mismatch at {site}: {detail}")]
    ShapeMismatch { site: String, detail: String },

    /// An engine operation produced a NaN or infinity.
    #[error("non-finite value produced by node {node}")]
    NonFinite { node: String },

    /// A shared-buffer read observed a generation older than the buffer's.
    #[error("stale shared-buffer read at {site}: slot generation {slot_gen}, buffer generation {buf_gen}")]
    StaleBuffer {
        site: String,
        slot_gen: u64,
        buf_gen: u64,
    },

    /// A write would exceed a shared buffer's pre-allocated capacity.
    #[error("shared buffer overflow at {site}: need {needed} elements, capacity {capacity}")]
    BufferOverflow {
        site: String,
        needed: usize,
        capacity: usize,
    },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    /// Training diverged (non-finite loss).
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(site: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            site: site.into(),
            detail: detail.into(),
        }
    }
}
