use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in weight file (expected \"MLCW\", found {found:?})")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weight file version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("weight file truncated while reading {what}")]
    Truncated { what: String },

    #[error("shape mismatch for {name}: file has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("phase mismatch for {name}: file is {found}, model is {expected}")]
    PhaseMismatch {
        name: String,
        found: String,
        expected: String,
    },

    #[error("malformed weight file: {0}")]
    Format(String),

    #[error("sample {id} in {split}/{class}: missing wavelengths {missing:?}")]
    MissingWavelengths {
        split: String,
        class: String,
        id: String,
        missing: Vec<String>,
    },

    #[error("unparseable PGM {path}: {reason}")]
    Pgm { path: PathBuf, reason: String },

    #[error("unknown class directory {0:?}")]
    UnknownClass(String),

    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr:e}): loss is {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("usage: {0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
