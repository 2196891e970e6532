//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any depthflow operation.
///
/// Variants are grouped by failure class: invalid call arguments, data that
/// violates a documented invariant, file-format problems, and numerical
/// failures. The CLI maps these classes onto distinct process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data violates an invariant (non-finite entries, bad shapes, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// A token state has zero norm where a direction is required.
    #[error("zero-norm state at sample {sample}, layer {layer}, token {token}")]
    ZeroNormState {
        sample: usize,
        layer: usize,
        token: usize,
    },

    /// A quantity is undefined on this input (zero update matrix,
    /// degenerate mean direction, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative numerical routine hit its iteration cap.
    #[error("{op} failed to converge after {iterations} iterations")]
    NonConvergence { op: &'static str, iterations: usize },

    /// A non-iterative numerical contract could not be met.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Trajectory file does not start with the ATRJ magic.
    #[error("bad magic in trajectory file: {path}")]
    BadMagic { path: String },

    /// Trajectory file declares an unsupported format version.
    #[error("unsupported trajectory format version {version} in {path}")]
    UnsupportedVersion { version: u32, path: String },

    /// Trajectory file ends before the declared payload is complete.
    #[error("truncated trajectory file: {path} ({detail})")]
    Truncated { path: String, detail: String },

    /// Trajectory payload contains NaN or infinite values.
    #[error("non-finite payload value in {path} at flat index {index}")]
    NonFinitePayload { path: String, index: usize },

    /// Token role table violates the exactly-one-cls invariant.
    #[error("invalid role table in {path}: {detail}")]
    RoleViolation { path: String, detail: String },

    /// Underlying I/O failure, with the path that was being accessed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON in a config, partition, or checkpoint header.
    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for failures of numerical routines (as opposed to bad inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::Numerical(_) | Error::Degenerate(_)
        )
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
