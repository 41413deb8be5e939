use thiserror::Error;

/// Errors raised by the grid, solver and reconstruction layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("carrier mismatch: expected {expected} values, got {got}")]
    CarrierMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{solver} did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("nonlinearity violates its class: {0}")]
    ClassViolation(String),

    #[error("potential not admissible: min q = {min_q:.6e} < -c = {neg_c:.6e}")]
    QNotAdmissible { min_q: f64, neg_c: f64 },

    #[error("grid does not resolve the CGO phase: spacing {spacing:.4e} > h/4 = {limit:.4e}")]
    Resolution { spacing: f64, limit: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
