use thiserror::Error;

/// Errors raised by the ensemble synthesis library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("basis order {order} exceeds grid resolution of {n_steps} steps")]
    Resolution { order: usize, n_steps: usize },

    #[error("sample index {index} out of range for ensemble of {count}")]
    IndexOutOfRange { index: usize, count: usize },

    #[error(
        "singular Gramian for sample {sample}{}: smallest eigenvalue {min_eig:e}, largest {max_eig:e}",
        outer.map(|k| format!(" (outer iteration {k})")).unwrap_or_default()
    )]
    SingularGramian {
        sample: usize,
        min_eig: f64,
        max_eig: f64,
        outer: Option<usize>,
    },

    #[error("numerical blowup: {0}")]
    NumericalBlowup(String),

    #[error("spectrum of I - W leaves [0, 1]: eigenvalue {eigenvalue:e}")]
    SpectrumViolation { eigenvalue: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

pub(crate) fn invalid(msg: impl Into<String>) -> EnsembleError {
    EnsembleError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> EnsembleError {
    EnsembleError::Shape(msg.into())
}
