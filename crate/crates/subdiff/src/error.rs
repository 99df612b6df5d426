use thiserror::Error;

/// Errors raised by the library. Every variant has a short machine-readable kind.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid model: {}", .0.join("; "))]
    InvalidModel(Vec<String>),
    #[error("series not converged: achieved tolerance {achieved:.3e} after {terms} terms")]
    Truncation { achieved: f64, terms: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("solver failed after {iterations} iterations (residual {residual:.3e}): {message}")]
    Solver {
        message: String,
        iterations: usize,
        residual: f64,
    },
    #[error("ill-conditioned system: {0}")]
    Conditioning(String),
    #[error("unsupported: {0}")]
    Capability(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("simulation error: {0}")]
    Simulation(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::InvalidModel(_) => "invalid_model",
            Error::Truncation { .. } => "truncation",
            Error::Precondition(_) => "precondition",
            Error::Solver { .. } => "solver",
            Error::Conditioning(_) => "conditioning",
            Error::Capability(_) => "capability",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Simulation(_) => "simulation",
        }
    }

    pub(crate) fn solver(message: impl Into<String>, iterations: usize, residual: f64) -> Self {
        Error::Solver {
            message: message.into(),
            iterations,
            residual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
