//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the simulation, training, and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration value is inconsistent or unsatisfiable.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A numerical operation failed (non-finite values, singular solve,
    /// failed factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An operation was called in the wrong state (missing forward cache,
    /// uninitialized optimizer).
    #[error("state error: {0}")]
    State(String),

    /// A retry or resource cap was exceeded.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// The requested task is degenerate (e.g. single-class classification,
    /// zero-variance regression target).
    #[error("degenerate task: {0}")]
    Degenerate(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
