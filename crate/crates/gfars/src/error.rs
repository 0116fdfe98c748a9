use crate::ndcore::NdError;
use thiserror::Error;

/// Crate-wide error type. The CLI maps the variants onto exit codes, so new
/// failure modes should pick the variant matching how the caller can react.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nd(#[from] NdError),
    /// Argument outside its mathematical domain (a caller bug).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    /// Run configuration unusable (exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// Dataset missing, malformed, or inconsistent (exit code 3).
    #[error("data error: {0}")]
    Dataset(String),
    /// Training or sampling produced non-finite numbers (exit code 4).
    #[error("numeric divergence: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// CLI exit code class. JSON failures count as data errors: the only
    /// JSON the tools parse is dataset and prediction files.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dataset(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
