use std::path::PathBuf;

use thiserror::Error;

use crate::model::InvalidRecord;
use crate::query::QueryError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    InvalidRecord(#[from] InvalidRecord),

    #[error("line {line_no}: {reason}")]
    Parse { line_no: usize, reason: String },

    #[error("frame {frame_id} is out of order")]
    OutOfOrderFrame { frame_id: u64 },

    #[error("storage limit of {limit} bytes reached")]
    StorageFull { limit: u64 },

    #[error("corrupt segment {}: {reason} at offset {offset}", path.display())]
    CorruptSegment {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("corrupt index {}: {reason}", path.display())]
    CorruptIndex { path: PathBuf, reason: String },

    #[error("store is open read-only")]
    ReadOnly,

    #[error("store format version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("no store at {}", .0.display())]
    NoStore(PathBuf),

    #[error("store at {} is locked by another writer", .0.display())]
    Locked(PathBuf),

    #[error("migration refused: {0}")]
    MigrationConflict(String),

    #[error("covariance is not symmetric positive-definite")]
    NonSpd,

    #[error("detection frame {detection} does not match frame {frame}")]
    FrameMismatch { detection: u64, frame: u64 },

    #[error("unknown frame {0}")]
    UnknownFrame(u64),

    #[error("reprocessor failed: {0}")]
    ReprocessorFailure(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Query(#[from] QueryError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
