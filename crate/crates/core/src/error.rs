use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's preconditions (dimensions, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular discretization: {0}")]
    SingularDiscretization(String),

    /// Cost evaluation needed data for an agent that was never received.
    #[error("incomplete neighbor assumptions: no data for agent {agent}")]
    IncompleteAssumption { agent: usize },

    #[error("horizon mismatch: expected {expected}, got {got}")]
    HorizonMismatch { expected: usize, got: usize },

    #[error("solver could not satisfy equality constraints (best residual {best_residual:.3e})")]
    Infeasible { best_residual: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("initialization failed for agent {agent}: {reason}")]
    Initialization { agent: usize, reason: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
