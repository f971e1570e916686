use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("character {0:?} is not in the alphabet")]
    InvalidCharacter(char),

    #[error("invalid label {label:?}: {reason}")]
    InvalidLabel { label: String, reason: String },

    #[error("{what} {value} out of range 0..{bound}")]
    OutOfRange {
        what: &'static str,
        value: usize,
        bound: usize,
    },

    #[error("requested {requested} distinct codes but only {capacity} exist")]
    Capacity { requested: u128, capacity: u128 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Diverged { iteration: u64, what: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: bad {field}: {reason}", path.display())]
    Format {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("{}: manifest lists {manifest} samples but {found} images are present", path.display())]
    CountMismatch {
        path: PathBuf,
        manifest: usize,
        found: usize,
    },

    #[error("{}: checkpoint corrupted ({reason})", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("{}: checkpoint version {found}, expected {expected}", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
