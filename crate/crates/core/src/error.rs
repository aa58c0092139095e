// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
///
/// The variants map onto the CLI exit codes: [`Error::Config`] → 2,
/// [`Error::Dependency`] → 3, [`Error::Numeric`] → 4, everything else → 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("state error: {0}")]
    State(String),

    #[error("unsupported op `{0}` in differentiable program")]
    UnsupportedOp(String),

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("infeasible pruning ratio: {0}")]
    InfeasibleRatio(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency `{0}`")]
    Dependency(String),

    #[error("checksum mismatch for {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dependency(_) | Error::Checksum { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
