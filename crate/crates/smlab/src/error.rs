use thiserror::Error;

/// Crate-wide error type.
///
/// Contract violations (`ContractViolation`, `TapeMismatch`) indicate caller
/// bugs; `ShapeMismatch`, `NonFinite`, and `IndexOutOfRange` indicate bad
/// data reaching an operation; the remaining variants wrap I/O and
/// configuration problems surfaced by the command-line tools.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("operand recorded on a different tape (op {op})")]
    TapeMismatch { op: &'static str },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range for dimension {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("integration diverged at step {step}")]
    Diverged { step: usize },

    #[error("time {t} outside the supported interval [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            op,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
