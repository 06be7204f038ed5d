use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("{what} must be symmetric positive definite")]
    NotPositiveDefinite { what: String },

    #[error("{what} is singular")]
    Singular { what: String },

    #[error("eigenvalue decomposition did not converge")]
    EigenFailure,

    #[error("no stabilizing Riccati solution: {0}")]
    NoStabilizingSolution(String),

    #[error("matrix equation is singular: eigenvalue sum {min_sum:e} is numerically zero")]
    SingularEquation { min_sum: f64 },

    #[error("{what} is not Hurwitz (spectral abscissa {abscissa:e})")]
    NotHurwitz { what: String, abscissa: f64 },

    #[error("communication graph is disconnected")]
    Disconnected,

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("numerical overflow at step {step}")]
    Overflow { step: usize },
}
