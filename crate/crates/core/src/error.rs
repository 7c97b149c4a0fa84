use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong while loading banks, fitting detectors or scoring.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {0:?}, expected \"OODB\"")]
    BadMagic([u8; 4]),

    #[error("unsupported bank format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated bank: header declares {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("{extra} unexpected trailing bytes after bank payload")]
    TrailingBytes { extra: u64 },

    #[error("non-finite value in {section} at flat index {index}")]
    NonFinite { section: &'static str, index: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    LabelOutOfRange {
        row: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("missing {0}")]
    Missing(&'static str),

    #[error("feature row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error("query feature has zero norm")]
    ZeroNormQuery,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown score `{0}`")]
    UnknownScore(String),

    #[error("csv ingestion: {0}")]
    Csv(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 2 usage, 3 data/format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) | Error::UnknownScore(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}
