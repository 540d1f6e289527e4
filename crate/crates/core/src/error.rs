use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// Every variant has a stable machine-readable code (see [`Error::code`])
/// which the HTTP service and the CLI surface verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("input is empty: {0}")]
    EmptyInput(String),
    #[error("ragged input: {0}")]
    RaggedInput(String),
    #[error("missing value at row {row}, column {column:?}")]
    MissingValue { row: usize, column: String },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("unknown head {0:?}")]
    UnknownHead(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("training diverged: {0}")]
    DivergedError(String),
    #[error("too few rows: {rows} rows for {k} clusters")]
    TooFewRows { rows: usize, k: usize },
    #[error("bad perplexity {perplexity} for {rows} rows")]
    BadPerplexity { perplexity: f64, rows: usize },
    #[error("stale result: {0}")]
    StaleResult(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("cancelled")]
    Cancelled,
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput(_) => "EmptyInput",
            Error::RaggedInput(_) => "RaggedInput",
            Error::MissingValue { .. } => "MissingValue",
            Error::UnknownColumn(_) => "UnknownColumn",
            Error::UnknownDataset(_) => "UnknownDataset",
            Error::InvalidPartition(_) => "InvalidPartition",
            Error::UnknownHead(_) => "UnknownHead",
            Error::ShapeError(_) => "ShapeError",
            Error::DivergedError(_) => "DivergedError",
            Error::TooFewRows { .. } => "TooFewRows",
            Error::BadPerplexity { .. } => "BadPerplexity",
            Error::StaleResult(_) => "StaleResult",
            Error::BadConfig(_) => "BadConfig",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Cancelled => "Cancelled",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
