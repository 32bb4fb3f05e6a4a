use thiserror::Error;

/// Error classes shared across the crate. Each variant maps to one failure
/// class so callers (and the CLI exit codes) can dispatch on kind.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unknown parameter: {0}")]
    UnknownParameter(String),
    #[error("singular value in oracle: {0}")]
    Singularity(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
