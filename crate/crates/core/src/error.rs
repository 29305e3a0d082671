use thiserror::Error;

/// Errors raised by the sampler, the asymptotics toolkit and the experiment harness.
#[derive(Debug, Error)]
pub enum SmcError {
    /// An argument lies outside the domain of the operation (e.g. a non-finite state).
    #[error("domain error: {0}")]
    Domain(String),

    /// A parameter violates its documented precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The target lacks a capability the operation needs, typically an exact sampler.
    #[error("unsupported target: {0}")]
    UnsupportedTarget(String),

    #[error("numerical integration failed: {0}")]
    Integration(String),

    /// A Monte Carlo estimate is too degenerate to be trusted.
    #[error("insufficient precision: {0}")]
    Precision(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SmcError {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            SmcError::Domain(_)
            | SmcError::Parameter(_)
            | SmcError::UnsupportedTarget(_)
            | SmcError::Config(_) => 2,
            SmcError::Integration(_) | SmcError::Precision(_) => 3,
            SmcError::Io(_) | SmcError::Csv(_) => 1,
        }
    }
}

pub type Result<T, E = SmcError> = std::result::Result<T, E>;
