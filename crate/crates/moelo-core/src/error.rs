//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum. Variants mirror the failure classes of each
/// subsystem so callers can match on what actually went wrong.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An input is degenerate for the requested operation (e.g. zero vector).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The requested anchor geometry cannot exist.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// An operation was called in a state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    /// A class / region / label is unknown to the registry.
    #[error("registry error: {0}")]
    Registry(String),

    /// Expert capacity (anchor count) exhausted.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A scenario or increment plan is internally inconsistent.
    #[error("plan error: {0}")]
    Plan(String),

    /// A dataset slice is empty or otherwise unusable.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint serialization / deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
