//! Error taxonomy shared by the library and the CLI.
//!
//! The CLI maps variants onto exit codes: user-input problems (parameters,
//! dimensions, data, capacity, experiment specs) exit 2, runtime failures
//! (I/O, internal consistency) exit 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structurally impossible shapes: zero users, mismatched lengths.
    #[error("invalid dimensions: {0}")]
    Dimension(String),

    /// A scalar argument outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed or non-finite input data.
    #[error("invalid data: {0}")]
    Data(String),

    /// Brute-force enumeration refused to avoid a 2^K blowup.
    #[error("user count {users} exceeds brute-force cap {cap}")]
    Capacity { users: usize, cap: usize },

    /// An internal invariant failed; indicates a bug, not bad input.
    #[error("internal consistency violation: {0}")]
    Internal(String),

    /// A fixed-point summary was requested but no run converged.
    #[error("no converged runs to summarize")]
    EmptySummary,

    #[error("experiment spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
