use thiserror::Error;

/// Errors produced by the simulation, reconstruction and estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (geometry, schedules, windows, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Mismatched dimensions between related containers.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation applied in the wrong pipeline state (e.g. double weighting).
    #[error("state error: {0}")]
    State(String),

    /// Degenerate numerical configuration (rank-deficient solve, empty histogram).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Point at or behind the source plane; projection undefined.
    #[error("point at or behind source: depth {depth}")]
    BehindSource { depth: f64 },

    /// Non-finite loss or objective during optimization.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
