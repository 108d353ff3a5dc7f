use thiserror::Error;

/// Errors raised by the model, filtering, sampling and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: String,
        found: String,
    },

    #[error("innovation covariance is not positive definite at t={t}")]
    SingularInnovation { t: usize },

    #[error("every candidate indicator has zero posterior weight at t={t}")]
    ImpossibleState { t: usize },

    #[error("regression posterior precision is singular")]
    DegenerateRegression,

    #[error("reduction matrix Theta' Sigma^-1 Theta is rank deficient")]
    ReductionRank,

    #[error("degenerate basis: {0}")]
    DegenerateBasis(String),

    #[error("inefficiency factor undefined: {0}")]
    UndefinedInefficiency(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sweep failed in step {step} ({name}): {source}")]
    Sweep {
        step: usize,
        name: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("chain failed at iteration {iteration}: {source}")]
    Chain {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("missing output: {0}")]
    MissingOutput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(what: &str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            what: what.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True when the error stems from numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularInnovation { .. }
            | Error::ImpossibleState { .. }
            | Error::DegenerateRegression
            | Error::ReductionRank
            | Error::Numerical(_)
            | Error::UndefinedInefficiency(_) => true,
            Error::Sweep { source, .. } | Error::Chain { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
