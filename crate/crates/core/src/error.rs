use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("noise coefficient is not invertible: {0}")]
    NotInvertible(String),
    #[error("modulus integral diverges; partial sums by dyadic level: {trace:?}")]
    DivergentModulus { trace: Vec<f64> },
    #[error("iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("certificate failed: {0}")]
    Certificate(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LabError::Dimension { expected, got })
    }
}

pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(LabError::Domain(format!("{name} must be positive and finite, got {value}")))
    }
}
