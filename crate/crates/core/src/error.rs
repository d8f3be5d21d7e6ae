use thiserror::Error;

use crate::ids::DiskName;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("disk too small: {blocks} blocks, need at least {min}")]
    DiskTooSmall { blocks: u64, min: u64 },

    #[error("no such file or directory: {0}")]
    NotFound(String),

    #[error("already exists: {0}")]
    AlreadyExists(String),

    #[error("not a directory: {0}")]
    NotADirectory(String),

    #[error("is a directory: {0}")]
    IsADirectory(String),

    #[error("directory not empty: {0}")]
    DirectoryNotEmpty(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("read out of bounds: offset {offset} beyond size {size} of {path}")]
    OutOfBounds { path: String, offset: u64, size: u64 },

    #[error("file too large: {path} would need {blocks} blocks")]
    FileTooLarge { path: String, blocks: u64 },

    #[error("no space left: need {need} blocks, {free} free")]
    NoSpace { need: u64, free: u64 },

    #[error("no free inodes")]
    NoInodes,

    #[error("malformed file call: {0}")]
    MalformedCall(String),

    #[error("metadata blob exhausted ({capacity} blocks)")]
    BlobExhausted { capacity: u64 },

    #[error("unknown image {0}")]
    UnknownImage(DiskName),

    #[error("image {0} already registered")]
    DuplicateImage(DiskName),

    #[error("shuffle needs at least two images, got {0}")]
    ShuffleTooSmall(usize),

    #[error("shuffle participants do not share identical metadata")]
    MetadataMismatch,

    #[error("the actual image cannot be retired")]
    RetireActual,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("insufficient samples: got {got}, need {need}")]
    InsufficientSamples { got: usize, need: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
