use thiserror::Error;

/// Errors raised by the analysis library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("trajectory diverged at t={t}: component {index} = {value}")]
    Diverged { t: u64, index: usize, value: f64 },

    #[error("w is not a critical point: |grad|_inf = {grad_norm:e}")]
    NotCriticalPoint { grad_norm: f64 },

    #[error("unknown objective id `{0}`")]
    UnknownObjective(String),

    #[error("unknown preset id `{0}`")]
    UnknownPreset(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("spectral radius of an empty eigenvalue list is undefined")]
    EmptyEigenvalues,

    #[error("objective has no known minimum")]
    NoKnownMinimum,

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("certificate unavailable: fixed point is not exponentially stable (rho = {rho})")]
    CertificateUnavailable { rho: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
