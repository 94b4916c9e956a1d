use std::fmt;

/// Crate-wide error type. Variants map onto the distinct failure classes the
/// CLI reports with separate exit codes.
#[derive(Debug)]
pub enum Error {
    /// Tensor/operation shape disagreement.
    Shape(String),
    /// Domain violation (negative distance, ln of non-positive value, ...).
    Domain(String),
    /// Invalid configuration.
    Config(String),
    /// Malformed file contents (manifest, checkpoint, CSV).
    Format(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Non-finite value where a finite one is required (training aborts here).
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

macro_rules! err_shape {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! err_domain {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
macro_rules! err_config {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! err_format {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}

pub(crate) use {err_config, err_domain, err_format, err_shape};
