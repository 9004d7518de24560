//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed an argument outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor or layer shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration file or flag value failed schema validation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Volume file does not start with the MVL1 magic bytes.
    #[error("{path}: not an MVOL file (bad magic)")]
    MvolBadMagic { path: PathBuf },

    /// Volume file ended before the advertised voxel payload.
    #[error("{path}: truncated MVOL payload (expected {expected} voxels, got {got})")]
    MvolTruncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },

    /// Volume payload contains NaN or infinite voxels.
    #[error("{path}: non-finite voxel at flat index {index}")]
    MvolNonFinite { path: PathBuf, index: usize },

    /// A manifest row could not be parsed.
    #[error("{path}:{row}: {message}")]
    Manifest {
        path: PathBuf,
        row: usize,
        message: String,
    },

    /// A subject's volume file could not be read.
    #[error("subject {subject}: cannot read volume {path}: {message}")]
    MissingVolume {
        subject: String,
        path: PathBuf,
        message: String,
    },

    /// Generic data-level failure (bad checkpoint, mixed extents, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Training loss became NaN or infinite.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// A gradient became NaN or infinite.
    #[error("non-finite gradient for parameter {parameter}")]
    NonFiniteGradient { parameter: String },

    /// An operation that needs both classes saw only one.
    #[error("degenerate input: only one class present")]
    SingleClass,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => 3,
            _ => 2,
        }
    }
}
