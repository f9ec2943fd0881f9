use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("empty visit record for level set `{0}`")]
    EmptyRecord(String),

    #[error("matrix product not positive within {cutoff} steps starting at index {index}")]
    Primitivity { index: i64, cutoff: usize },

    #[error("window exhausted: {0}")]
    WindowExhausted(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("range [{from}, {from}+{n}) escapes window of length {len}")]
    RangeEscape { from: i64, n: usize, len: usize },

    #[error("no convergence: {message} (last residuals {trace:?})")]
    Convergence { message: String, trace: Vec<f64> },

    #[error("cone membership violated: {0}")]
    Membership(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("window too short: need {required} fibers, have {available}")]
    Demand { required: usize, available: usize },

    #[error("twist outside admissible domain: {0}")]
    Domain(String),

    #[error("truncation error: {0}")]
    Truncation(String),

    #[error("degenerate variance: {0}")]
    Degenerate(String),
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
