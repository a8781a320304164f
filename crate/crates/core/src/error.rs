use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped by the CLI exit code they map to: validation-style
/// problems, capacity limits, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("atoms {0} and {1} coincide")]
    SingularDistance(usize, usize),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("ring size {0} is even; kink states need an odd ring")]
    Parity(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("integration failed: {0}")]
    Integration(String),
    #[error("search exhausted: {0}")]
    SearchExhausted(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("confusion model is singular at site {0}")]
    SingularModel(usize),
    #[error("posterior is degenerate: every member has zero likelihood")]
    DegeneratePosterior,
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for this error class: 2 validation, 3 capacity,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Capacity(_) => 3,
            Error::Integration(_)
            | Error::SearchExhausted(_)
            | Error::Optimization(_)
            | Error::Fit(_)
            | Error::SingularModel(_)
            | Error::DegeneratePosterior => 4,
            _ => 2,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
