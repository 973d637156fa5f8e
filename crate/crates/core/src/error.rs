use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },
    #[error("non-finite loss term `{term}` at training step {step}")]
    NonFiniteLoss { term: &'static str, step: u64 },
    #[error("chain is not ergodic: {0}")]
    NonErgodic(String),
    #[error("injectivity violated: slice {slice} has condition number {condition:.3e}")]
    Injectivity { slice: String, condition: f64 },
    #[error("spectral decomposition is not unique: {0}")]
    Uniqueness(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        expected: expected.into(),
        found: found.into(),
    }
}
