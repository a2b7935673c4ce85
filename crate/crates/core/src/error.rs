use std::ops::Range;

use thiserror::Error;

/// Errors raised by the library. Configuration problems and numerical aborts
/// are kept distinct so the CLI can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("id {id} of table {table} is outside the presented row range {}..{}", range.start, range.end)]
    IdOutOfRange {
        table: u32,
        id: u64,
        range: Range<u64>,
    },

    #[error("row {row} is outside shard {}..{} of table {table}", range.start, range.end)]
    RowOutOfShard {
        table: u32,
        row: u64,
        range: Range<u64>,
    },

    #[error("moment must be nonnegative, got {0}")]
    NegativeMoment(f64),

    #[error("gradient for row {row} is not finite")]
    NonFiniteGradient { row: u64 },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Undefined(&'static str),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by bad input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Topology(_))
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
