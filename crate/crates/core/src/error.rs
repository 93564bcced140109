//! Crate-wide error type.

/// Errors reported by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs that are individually valid do not fit together.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A numerical routine failed (e.g. a Cholesky factorization).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// No projection dimension fits the estimate budget.
    #[error(
        "infeasible: n = {n} estimates cannot support any q in [1, {q_max}] \
         for p = {p} variates (need n >= p + 1 = {})",
        p + 1
    )]
    Infeasible { n: usize, p: usize, q_max: usize },

    /// A malformed input file, with the offending line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
