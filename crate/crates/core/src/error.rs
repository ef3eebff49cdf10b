use std::io;

use thiserror::Error;

use crate::model::{DType, EmbeddingKey, TableName};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding an `UpdateBatch` frame.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("payload truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after batch")]
    TrailingBytes(usize),
    #[error("duplicate key {0} in batch")]
    DuplicateKey(EmbeddingKey),
    #[error("unknown dtype tag {0}")]
    UnknownDType(u8),
    #[error("invalid table name: {0}")]
    InvalidTableName(String),
    #[error("invalid vector: {0}")]
    InvalidVector(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid table name: {0}")]
    InvalidTableName(String),
    #[error("invalid dimension {0} (must be 1..=4096)")]
    InvalidDim(usize),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: u16, actual: u16 },
    #[error("dtype mismatch: expected {expected:?}, got {actual:?}")]
    DTypeMismatch { expected: DType, actual: DType },
    #[error("duplicate key {0} in batch")]
    DuplicateKey(EmbeddingKey),
    #[error("value {0} is outside the binary16 range")]
    F16Saturation(f32),
    #[error("unknown table `{0}`")]
    UnknownTable(TableName),
    #[error("table `{0}` already exists with different metadata")]
    TableConflict(TableName),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shard index {idx} out of range (num_shards = {num_shards})")]
    BadShard { idx: usize, num_shards: usize },
    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),
    #[error("corruption in {path}: {reason}")]
    Corruption { path: String, reason: String },
    #[error("placement infeasible: {0}")]
    Infeasible(String),
    #[error("{tier} tier failure: {source}")]
    Tier {
        tier: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn in_tier(self, tier: &'static str) -> Error {
        match self {
            // Caller errors stay as they are so the service can map them.
            e @ (Error::UnknownTable(_)
            | Error::DimMismatch { .. }
            | Error::DTypeMismatch { .. }) => e,
            other => Error::Tier {
                tier,
                source: Box::new(other),
            },
        }
    }
}
