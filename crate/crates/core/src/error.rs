use thiserror::Error;

/// Errors surfaced by model loading and the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid market specification:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("invalid tree topology: {0}")]
    Topology(String),

    #[error("arbitrage detected at node `{node}`: {detail}")]
    Arbitrage { node: String, detail: String },

    #[error("static options admit arbitrage: {0}")]
    OptionArbitrage(String),

    #[error("solver tolerance breach: {0}")]
    SolverTolerance(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Validation(_)
            | Error::Topology(_)
            | Error::Dimension(_)
            | Error::InvalidArgument(_)
            | Error::Io(_) => 2,
            Error::SolverTolerance(_) => 3,
            Error::Arbitrage { .. } | Error::OptionArbitrage(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Validation(_) => "validation",
            Error::Topology(_) => "topology",
            Error::Arbitrage { .. } => "arbitrage",
            Error::OptionArbitrage(_) => "option_arbitrage",
            Error::SolverTolerance(_) => "solver_tolerance",
            Error::Dimension(_) => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
