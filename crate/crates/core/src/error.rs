use std::path::PathBuf;

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure in `{param}`: {detail}")]
    Numerical { param: String, detail: String },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("prompt of clip {clip} overflows the decoder context ({len} > {limit})")]
    ContextOverflow { clip: usize, len: usize, limit: usize },

    #[error("i/o error on {path:?}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(param: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            param: param.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
