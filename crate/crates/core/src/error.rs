use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum SfpError {
    /// Malformed or out-of-contract input (shapes, non-finite values, bad config).
    #[error("invalid input: {0}")]
    Input(String),

    /// A matrix that must be inverted is numerically singular.
    #[error("ill-conditioned matrix: {0}")]
    Conditioning(String),

    /// A requested rank or dimension is not supported by the data.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Eigenvalue gaps too small for first-order perturbation formulas.
    #[error("degenerate spectrum at eigen-indices {indices:?} (min gap {min_gap:e})")]
    DegenerateSpectrum { indices: Vec<(usize, usize)>, min_gap: f64 },

    /// A fairness or utility metric is undefined for this input.
    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("report schema version {found}, expected {expected}")]
    Schema { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SfpError>;

impl From<csv::Error> for SfpError {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        SfpError::Csv {
            line,
            message: err.to_string(),
        }
    }
}
