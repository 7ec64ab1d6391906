use std::fmt;

/// Error type shared across the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Dim(String),
    /// Argument outside its valid domain (bad bit-width, non-positive step, ...).
    Domain(String),
    /// Malformed input file (IDX, run config, checkpoint manifest).
    Format(String),
    /// Checkpoint manifest and blob disagree; names the offending tensor.
    Corrupt { tensor: String, detail: String },
    /// A computation produced NaN/Inf.
    NonFinite(String),
    /// Run configuration problem (unknown key, missing key, bad value).
    Config(String),
    /// Operation refused (existing outputs, config-space cap exceeded, ...).
    Refused(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(msg) => write!(f, "dimension error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Corrupt { tensor, detail } => {
                write!(f, "corrupt checkpoint: tensor `{tensor}`: {detail}")
            }
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Refused(msg) => write!(f, "refused: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
