use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
///
/// The variants group into the three failure families the CLI maps onto exit
/// codes: configuration/usage (1), data (2) and numerical (3).
#[derive(Debug)]
pub enum Error {
    /// Invalid hyperparameter, shape or model configuration.
    Config(String),
    /// API misuse, e.g. calling backward on a non-scalar.
    Usage(String),
    /// Malformed or inconsistent data on disk or in memory.
    Data(String),
    /// A file referenced by a manifest does not exist.
    MissingFile(PathBuf),
    /// A file's content hash does not match the manifest.
    Checksum { file: PathBuf, expected: String, actual: String },
    /// A named radiomic feature evaluated to NaN or infinity.
    NonFiniteFeature { feature: &'static str, value: f64 },
    /// Loss or gradient blew up.
    Numerical(String),
    Io(io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Data(_)
            | Error::MissingFile(_)
            | Error::Checksum { .. }
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::NonFiniteFeature { .. } | Error::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::MissingFile(path) => write!(f, "missing file: {}", path.display()),
            Error::Checksum { file, expected, actual } => write!(
                f,
                "checksum mismatch for {}: expected {expected}, found {actual}",
                file.display()
            ),
            Error::NonFiniteFeature { feature, value } => {
                write!(f, "radiomic feature `{feature}` is not finite ({value})")
            }
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
