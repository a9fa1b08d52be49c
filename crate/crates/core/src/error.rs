use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("manifest parse error on line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },

    #[error("duplicate record path {path} (in {first} and {second})")]
    DuplicatePath {
        path: String,
        first: String,
        second: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("stage {stage} failed: {msg}")]
    Stage { stage: String, msg: String },
}

impl Error {
    /// Process exit code: 2 for failures while doing work, 1 for bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { .. } | Error::Io { .. } | Error::Image { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}
pub(crate) use invalid;
