//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up (matmul inner dims, grid mismatches, ...).
    #[error("dimension error: {0}")]
    Dim(String),

    /// A caller violated an operation contract (layout, cache depth, scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Image/patch geometry is invalid (indivisible sizes, degenerate grids, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Non-finite values or numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration failed validation; names the failing constraint.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file is malformed or inconsistent with the live model.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The search crop fell entirely outside the frame.
    #[error("tracking lost: {0}")]
    TrackingLost(String),

    /// Training diverged past the abort threshold.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
}
