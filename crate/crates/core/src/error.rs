//! Error taxonomy shared by the whole engine.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Malformed scenario text or expression, with a byte offset into the
    /// offending source.
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Structurally valid input with out-of-domain values.
    #[error("domain error: {0}")]
    Domain(String),

    /// A simulated channel produced a non-finite value; the batch is dropped.
    #[error("numerical abort: non-finite {channel} at path {path}, step {step}")]
    NonFinite {
        channel: &'static str,
        path: usize,
        step: usize,
    },

    /// A formula was invoked outside the regime where it is valid.
    #[error("assertion failed: {0}")]
    Assertion(String),

    /// Conditional target needs more state than the estimator carries.
    #[error("state insufficient for conditional target: {0}")]
    StateInsufficient(String),

    /// Regression basis lost rank after degenerate columns were removed.
    #[error("rank-deficient regression basis: {0}")]
    RankDeficient(String),

    /// Estimator preconditions (sample size, weights) violated.
    #[error("estimator error: {0}")]
    Estimator(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain(message.into())
    }
}
