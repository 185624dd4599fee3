use std::path::PathBuf;

/// Failure modes of the binary container readers (weights, stats, masks).
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("tensor `{name}` shape mismatch: header says {header:?}, model spec requires {expected:?}")]
    ShapeMismatch {
        name: String,
        header: (usize, usize),
        expected: (usize, usize),
    },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("non-finite value in tensor `{0}`")]
    NonFinite(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e}); increase the damping fraction")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("unknown activation site `{site}`; valid sites: {}", valid.join(", "))]
    UnknownSite { site: String, valid: Vec<String> },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("format error: {0}")]
    Container(#[from] FormatError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Unavailable(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the error class: 2 bad input, 3 numerical failure,
    /// 4 internal invariant breach.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. } | Error::Numerical(_) => 3,
            Error::Invariant(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
