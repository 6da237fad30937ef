//! Crate-wide error type.

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are inconsistent for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation produced NaN or Inf. Non-finite values are never silent.
    #[error("non-finite value in {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Integer coordinate outside the representable range.
    #[error("range error: {0}")]
    Range(String),

    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Text-format parse failure.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Checkpoint or other binary format violation.
    #[error("format error: {0}")]
    Format(String),

    /// Lookup of a parameter name that does not exist.
    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    /// Insertion of a parameter name that already exists.
    #[error("duplicate parameter: {0}")]
    DuplicateParam(String),

    /// Two evaluations of a supposedly pure computation disagreed.
    #[error("non-deterministic computation: {0}")]
    NonDeterministic(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI maps this error to (2 usage/config, 3 numeric).
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFinite { .. } | Error::NonDeterministic(_) => 3,
            _ => 2,
        }
    }
}
