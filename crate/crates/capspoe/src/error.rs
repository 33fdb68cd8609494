use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated payload: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("file length {len} is not a multiple of the {record}-byte record size")]
    RecordSize { len: usize, record: usize },
    #[error("grid of {rows}x{cols} cannot hold {count} images")]
    CountMismatch { rows: usize, cols: usize, count: usize },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("unsupported checkpoint version {found}, this build reads {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] capspoe_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for numerical or verification failures,
    /// 2 for bad input, configuration or files.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(_) | Error::Verification(_) => 1,
            _ => 2,
        }
    }
}
