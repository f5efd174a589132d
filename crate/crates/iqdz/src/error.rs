//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; the CLI maps each variant to
//! a single-line message on stderr and a nonzero exit code.

use std::fmt;

/// Errors produced anywhere in the codec pipeline.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration: bad shapes, out-of-range parameters, misuse of an API.
    Config(String),
    /// Non-finite value encountered during numeric evaluation.
    Numeric(String),
    /// Operation called in the wrong order (e.g. backward before forward).
    State(String),
    /// Malformed file: bad magic, version, CRC, or layout.
    Format(String),
    /// Symbol stream cannot be encoded (symbol outside table range).
    Encode(String),
    /// Payload cannot be decoded (truncation, exhaustion).
    Decode(String),
    /// Bitstream was produced by a different model than the one supplied.
    ModelMismatch(String),
    /// Training failure (divergence, bad dataset).
    Training(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Encode(m) => write!(f, "encode error: {m}"),
            Error::Decode(m) => write!(f, "decode error: {m}"),
            Error::ModelMismatch(m) => write!(f, "model mismatch: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
