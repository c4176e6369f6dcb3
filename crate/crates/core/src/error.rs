use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type. Contract violations (bad dimensions, NaN inputs,
/// malformed files) are distinguished from numeric failures so that callers
/// can map them to different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("factorization failed: {0}; add a small diagonal ridge and retry")]
    NeedsRidge(String),

    /// Solver ran out of sweeps. Carries the last iterate so a caller can
    /// inspect (or resume from) where it stopped.
    #[error("no convergence after {sweeps} sweeps (last max coordinate change {last_change:.3e})")]
    NonConvergence {
        sweeps: usize,
        last_change: f64,
        last_iterate: Vec<f64>,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by malformed caller input rather than numeric
    /// trouble on well-formed input.
    pub fn is_contract_violation(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Io { .. })
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
