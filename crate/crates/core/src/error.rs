use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: duplicate observation for pixel {pixel_id}, year {year}, period {period}")]
    DuplicateObservation {
        line: u64,
        pixel_id: u64,
        year: u32,
        period: u32,
    },

    #[error("line {line}: period out of range: {period} (expected 1..=24)")]
    PeriodOutOfRange { line: u64, period: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate series: estimated variance {variance:e} is not above {epsilon:e}")]
    DegenerateSeries { variance: f64, epsilon: f64 },

    #[error("no spatial variance")]
    NoSpatialVariance,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateSeries { .. } | Error::NoSpatialVariance | Error::NotPositiveDefinite(_)
        )
    }
}
