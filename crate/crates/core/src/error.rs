use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A cell could not be parsed. `row` is the 1-based data row (header excluded).
    #[error("parse error at row {row}, column \"{column}\": {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("malformed input: {0}")]
    Structure(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("constant column \"{column}\" cannot be standardized")]
    ConstantColumn { column: String },

    #[error("matrix is not positive definite after jitter ladder {jitters:?}")]
    Conditioning { jitters: Vec<f64> },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("unsupported model format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
