use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, D3Error>;

/// Error classes map one-to-one onto CLI exit codes, so every failure a
/// library call can produce has to fall into one of these buckets.
#[derive(Debug, Error)]
pub enum D3Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Malformed or unsupported on-disk data (bad magic, truncation,
    /// corrupted payload).
    #[error("format error: {0}")]
    Format(String),

    /// Shape or range preconditions violated (patch larger than the image,
    /// stride out of range, mismatched tensors, invalid config values).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Dictionary construction ran out of admissible candidates.
    #[error("learning error: level {level}: admitted {admitted} of {target} atoms after {attempts} draws (last rejection ratio {last_ratio:.4}); the corpus is too homogeneous for this epsilon")]
    Learning {
        level: usize,
        admitted: usize,
        target: usize,
        attempts: usize,
        last_ratio: f64,
    },

    /// Classifier training produced a non-finite loss.
    #[error("learning error: training diverged at epoch {epoch} (non-finite loss); try a learning rate smaller than {lr}")]
    Diverged { epoch: usize, lr: f64 },
}

impl D3Error {
    /// Process exit code for this error class.
    #[must_use]
    pub fn exit_code(&self) -> i32 {
        match self {
            D3Error::Io(_) => 2,
            D3Error::Format(_) => 3,
            D3Error::Dimension(_) => 4,
            D3Error::Learning { .. } | D3Error::Diverged { .. } => 5,
        }
    }
}
