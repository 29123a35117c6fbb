use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("truncation error: tail mass {tail:.3e} exceeds {limit:.1e} at n_trunc = {n_trunc}")]
    Truncation { tail: f64, limit: f64, n_trunc: usize },
    #[error("state has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("kernel is distributional (MarkovDelta) and has no pointwise value")]
    DistributionalKernel,
    #[error("covariance matrix is not positive semidefinite")]
    NotPositiveSemidefinite,
    #[error("F diverged at t = {t}")]
    FDiverged { t: f64 },
    #[error("coefficient {name} diverged at t = {t}")]
    CoefficientDiverged { name: &'static str, t: f64 },
    #[error("coefficient history does not cover t = {t}")]
    HistoryMissing { t: f64 },
    #[error("numerical blowup at t = {t}: squared norm {norm_sq:.3e}")]
    NumericalBlowup { t: f64, norm_sq: f64 },
    #[error("integral of F diverges at t = {t}")]
    DivergedIntegral { t: f64 },
    #[error("total dimension {dim} exceeds the limit {limit}")]
    DimensionTooLarge { dim: usize, limit: usize },
    #[error("{failed} of {total} trajectories failed (first: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Validation errors map to CLI exit code 2, numerical ones to 3.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::DistributionalKernel
                | Error::DimensionTooLarge { .. }
                | Error::Invalid(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Truncation { .. } => "TruncationError",
            Error::ZeroNorm => "ZeroNormError",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::DistributionalKernel => "DistributionalKernel",
            Error::NotPositiveSemidefinite => "NotPositiveSemidefinite",
            Error::FDiverged { .. } => "FDiverged",
            Error::CoefficientDiverged { .. } => "CoefficientDiverged",
            Error::HistoryMissing { .. } => "HistoryMissing",
            Error::NumericalBlowup { .. } => "NumericalBlowup",
            Error::DivergedIntegral { .. } => "DivergedIntegral",
            Error::DimensionTooLarge { .. } => "DimensionTooLarge",
            Error::TooManyFailures { .. } => "TooManyFailures",
            Error::Invalid(_) => "InvalidInput",
        }
    }
}
