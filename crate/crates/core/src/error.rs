use thiserror::Error;

/// Errors raised across design, solve and simulation.
///
/// The variants map onto the CLI exit codes: configuration problems (4),
/// infeasible offline designs (2) and falsified closed-loop guarantees (3).
#[derive(Debug, Error)]
pub enum SmpcError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("design error: {0}")]
    Design(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// An optimization problem that must be feasible by construction was not.
    #[error("invariant violation at k={step}: {message}")]
    InvariantViolation { step: usize, message: String },

    #[error("initial condition infeasible: {0}")]
    InitialInfeasible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SmpcError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn design(msg: impl Into<String>) -> Self {
        Self::Design(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self::Numerical(msg.into())
    }

    pub fn dim(msg: impl Into<String>) -> Self {
        Self::Dimension(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, SmpcError>;
