use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("layer {layer}: cannot place copy of expert {expert} without a same-expert collision")]
    PlacementInfeasible { layer: usize, expert: usize },

    #[error("malformed trace header: {0}")]
    MalformedHeader(String),

    #[error(
        "trace dimensions {batches}x{layers}x{experts} do not match payload of {found} entries"
    )]
    DimensionMismatch {
        batches: usize,
        layers: usize,
        experts: usize,
        found: usize,
    },

    #[error("truncated trace payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("load sum overflows u64 at layer {layer}, expert {expert}")]
    Overflow { layer: usize, expert: usize },

    #[error("unsupported file extension for {0:?} (expected .crft or .json)")]
    UnknownFormat(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
