use thiserror::Error;

/// Errors raised by the estimators, samplers and property checks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is singular (smallest eigenvalue {min_eigenvalue:e} <= tolerance {tolerance:e})")]
    SingularMatrix { min_eigenvalue: f64, tolerance: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotSpd(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("scatter estimate is singular: {0}")]
    SingularScatter(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("row {row} is numerically zero after centering")]
    ZeroVector { row: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("distribution has no independence certificate for components ({0}, {1})")]
    MissingCertificate(usize, usize),

    #[error("unknown fixture {0:?}")]
    UnknownFixture(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Variant name, used as a stable tag in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SingularMatrix { .. } => "SingularMatrix",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NotSpd(_) => "NotSpd",
            Error::InvalidInput(_) => "InvalidInput",
            Error::SingularScatter(_) => "SingularScatter",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::ZeroVector { .. } => "ZeroVector",
            Error::Unsupported(_) => "Unsupported",
            Error::MissingCertificate(..) => "MissingCertificate",
            Error::UnknownFixture(_) => "UnknownFixture",
        }
    }
}
