use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WvlpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WvlpError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("unsupported format version {found} in {path}")]
    BadVersion { path: PathBuf, found: u32 },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("malformed manifest in {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WvlpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WvlpError::Io {
            path: path.into(),
            source,
        }
    }
}
