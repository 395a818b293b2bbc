use thiserror::Error;

/// Errors surfaced by the inference library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("target vector l must be nonzero")]
    InvalidTarget,

    #[error("need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("instruments are degenerate (no informative columns); supply a metric explicitly")]
    DegenerateInstruments,

    #[error("matrix is not symmetric positive semi-definite: {0}")]
    NotPsd(String),

    #[error("covariance matrix has a non-positive diagonal entry at index {0}")]
    NonPositiveDiagonal(usize),

    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("kappa must lie in (0, alpha), got kappa={kappa}, alpha={alpha}")]
    InvalidKappa { kappa: f64, alpha: f64 },

    #[error("linear program did not converge within the iteration limit")]
    LpNumericalFailure,

    #[error("truncation bounds require a finite LP value")]
    LpValueInfinite,

    #[error("closed-form truncation bounds require a non-degenerate dual vertex")]
    VertexNotOk,

    #[error("gamma' Sigma gamma is not positive; conditional path is degenerate")]
    DegenerateGammaVariance,

    #[error("bisection invariant violated: the optimum must belong to the membership set")]
    BisectionInconsistent,

    #[error("dual vertex enumeration is limited to k <= {limit}, got k = {got}")]
    EnumerationGuard { limit: usize, got: usize },

    #[error("confidence grid is empty")]
    EmptyGrid,

    #[error("confidence region is empty at the supplied critical value")]
    EmptyCi,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv error at line {line}: {msg}")]
    CsvData { line: u64, msg: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
