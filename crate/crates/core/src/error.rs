use thiserror::Error;

/// Errors produced anywhere in the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column {0:?} not found")]
    MissingColumn(String),
    #[error("parse error at data row {row}, column {column:?}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("insufficient data: N = {n} rows but P = {p} parameters")]
    InsufficientData { n: usize, p: usize },
    #[error("degenerate subset: the dropped rows destroy identifiability ({0})")]
    DegenerateSubset(String),
    #[error("weak or degenerate instruments: {0}")]
    WeakInstruments(String),
    #[error("singular Jacobian of the estimating equation")]
    SingularJacobian,
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("quantity of interest has no gradient callback")]
    MissingGradient,
    #[error("target index {index} out of bounds for {p} parameters")]
    TargetOutOfBounds { index: usize, p: usize },
    #[error("alpha = {alpha} too small: floor(alpha * {n}) removes no data points")]
    AlphaTooSmall { alpha: f64, n: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("enumeration too large: {required} refits exceed the {limit} limit")]
    EnumerationTooLarge { required: usize, limit: usize },
    #[error("insufficient smoothness data: {0}")]
    InsufficientSmoothness(String),
    #[error("degenerate scale: the estimated standard error is zero")]
    DegenerateScale,
}

pub type Result<T> = std::result::Result<T, Error>;
