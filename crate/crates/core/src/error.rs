//! Error type shared by every stage, mapped onto the CLI exit codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown keys, invalid preset fields, flag misuse.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data, with the line number when line-oriented.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Semantically invalid data: bounds, overlaps, missing artifacts,
    /// hash mismatches.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape or vocabulary-size mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numerical failure: non-finite loss, degenerate statistics.
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Data(_) | Error::Shape(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
