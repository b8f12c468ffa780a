use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by fitting, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every term of a likelihood sum vanished for one observation.
    #[error("numerical underflow: marginal likelihood of observation {index} is zero")]
    NumericalUnderflow { index: usize },

    /// The clamped nonparametric update put zero weight on every atom.
    #[error("degenerate update: {0}")]
    DegenerateUpdate(String),

    #[error("problem too large for exhaustive enumeration: m = {m} exceeds {max}")]
    OracleScale { m: usize, max: usize },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("invalid row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("preprocessing error for gene {gene}: {message}")]
    Preprocessing { gene: usize, message: String },

    #[error("malformed prior file: {0}")]
    MalformedPrior(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable kind, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NumericalUnderflow { .. } => "numerical-underflow",
            Error::DegenerateUpdate(_) => "degenerate-update",
            Error::OracleScale { .. } => "oracle-scale",
            Error::MissingColumn(_) => "missing-column",
            Error::Parse { .. } => "parse",
            Error::InvalidRow { .. } => "invalid-row",
            Error::EmptyInput(_) => "empty-input",
            Error::Preprocessing { .. } => "preprocessing",
            Error::MalformedPrior(_) => "malformed-prior",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
