use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, tolerance {tol:e})")]
    NotPsd { min_eigenvalue: f64, tol: f64 },

    #[error("matrix is not in the covariance family with floor {floor} (min eigenvalue of q - floor*1 is {min_eigenvalue:e})")]
    NotInFamily { floor: f64, min_eigenvalue: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unknown activation `{0}`")]
    UnknownActivation(String),

    #[error("{what} did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        grad_norm: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("not supported: {0}")]
    NotSupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
