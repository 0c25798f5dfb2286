use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain violation in {op} at index {index}: value {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("quadrature failed to converge for entry ({row}, {col}): estimated error {error:e}")]
    Quadrature { row: usize, col: usize, error: f64 },

    #[error("rank-deficient retraction: |R_{index}{index}| = {value:e}")]
    RankDeficient { index: usize, value: f64 },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch for `{field}`: expected {expected}, found {found}")]
    DimMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
