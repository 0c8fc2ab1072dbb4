use std::path::PathBuf;

/// Every failure the engine can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("batch-norm mode error: {0}")]
    Mode(String),

    #[error("non-finite value in {context}")]
    Numeric { context: String },

    #[error("non-finite loss at iteration {iteration}: {context}")]
    NonFiniteLoss { iteration: usize, context: String },

    #[error("training diverged at iteration {iteration}: {context}")]
    Divergence { iteration: usize, context: String },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bad magic {found:?} (expected {expected:?})")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("file truncated while reading {context}")]
    Truncated { context: String },

    #[error("extent mismatch in {context}: expected {expected:?}, found {found:?}")]
    ExtentMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
