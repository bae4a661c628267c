use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure kinds the
/// public operations can produce, so callers can match on what went wrong
/// without parsing strings.
#[derive(Debug, Error)]
pub enum Error {
    /// Operation not defined for this model (e.g. density of an empirical sample).
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Quantile at p = 1 of a distribution with unbounded support.
    #[error("infinite support: {0}")]
    InfiniteSupport(String),

    /// Input outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Moment vector outside the closure of the admissible moment region.
    #[error("invalid moment vector: {0}")]
    InvalidMoments(String),

    /// Quadrature failed its convergence guard.
    #[error("quadrature error: {0}")]
    Quadrature(String),

    /// Integral diverges under truncation-sensitivity checking.
    #[error("integrability error: {0}")]
    Integrability(String),

    /// Fixed-point iteration made no progress; diagnostics embedded.
    #[error("solver stall: {0}")]
    SolverStall(String),

    /// Invalid configuration (bad parameter, malformed file, inconsistent sizes).
    #[error("config error: {0}")]
    Config(String),

    /// Requested work exceeds a stated cost guard.
    #[error("refused: {0}")]
    Refused(String),

    /// I/O failure while reading or writing run artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
