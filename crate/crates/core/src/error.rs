use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix: {0}")]
    SingularMatrix(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("zero denominator at state-action index {index}: {value}")]
    ZeroDenominator { index: usize, value: f64 },
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty support: {0}")]
    EmptySupport(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by bad inputs rather than numerical breakdown.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidMdp(_)
                | Error::InvalidPolicy(_)
                | Error::InvalidDistribution(_)
                | Error::EmptySupport(_)
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
