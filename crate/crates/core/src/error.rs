//! Error type shared across the simulator.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. Names the graph
    /// node so shape bugs are traceable to the model definition.
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    /// A named graph input was not bound before forward execution.
    #[error("unbound input `{0}`")]
    UnboundInput(String),

    /// An answer label fell outside the classifier's output range.
    #[error("label {label} outside [0, {n_answers})")]
    LabelOutOfRange { label: usize, n_answers: usize },

    /// Two flat parameter vectors that must align did not.
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A cached forward execution does not match the graph it is used with.
    #[error("stale execution cache: {0}")]
    StaleCache(String),

    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Record file (dataset fixture) malformed.
    #[error("record parse error at line {line}: {detail}")]
    RecordParse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
