use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("bitstream error: {0}")]
    Bitstream(String),

    #[error("weight container error: {0}")]
    WeightContainer(String),

    #[error("missing weight entry `{0}`")]
    MissingWeight(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("frame {frame_index}")]
    Frame {
        frame_index: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("external tool `{tool}` failed: {message}")]
    External { tool: String, message: String },

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the frame index it occurred at.
    pub(crate) fn at_frame(self, frame_index: u32) -> Self {
        Error::Frame {
            frame_index,
            source: Box::new(self),
        }
    }
}
