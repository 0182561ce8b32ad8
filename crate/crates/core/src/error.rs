use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("inconsistent channel chain: {0}")]
    Chain(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("channel mismatch: bundle expects {expected} input channels, image has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("empty feature stack")]
    EmptyStack,
    #[error("images are identical")]
    IdenticalImages,
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("invalid distortion spec: {0}")]
    InvalidSpec(String),
    #[error("empty corpus: no images or entries in {0}")]
    EmptyCorpus(PathBuf),
    #[error("too few records: need at least {needed}, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
