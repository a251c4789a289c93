//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("code {code} out of range for {levels} levels")]
    CodeOutOfRange { code: i64, levels: u32 },

    #[error("bad magic in {}: expected {expected:?}", path.display())]
    BadMagic { path: PathBuf, expected: [u8; 4] },

    #[error("unsupported format version {found} in {} (supported: {supported})", path.display())]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("checksum mismatch in {}: stored {stored:08x}, computed {computed:08x}", path.display())]
    CrcMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("truncated file {}: {detail}", path.display())]
    Truncated { path: PathBuf, detail: String },

    #[error("layer {0:?} not found")]
    MissingLayer(String),

    #[error("unknown layer {0:?} in recipe")]
    UnknownLayer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI. Config problems, missing
    /// prerequisites and numeric blowups get distinct codes so wrapper
    /// scripts can react; everything else is a generic failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}
