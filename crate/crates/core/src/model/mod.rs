//! Domain types shared by every tier: table names, keys, vectors, versioned
//! entries and update batches.

pub(crate) mod codec;
mod fp16;
mod hash;

use std::collections::HashSet;
use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{decode_update_batch, encode_update_batch, FORMAT_VERSION, MAGIC};
pub use fp16::{compress_f16, decompress_f16, F16_MAX};
pub use hash::{fnv1a64, key_hash, FNV_OFFSET_BASIS, FNV_PRIME};

pub const MAX_DIM: usize = 4096;
pub const MAX_TABLE_NAME_LEN: usize = 255;

/// Namespace of an embedding table. 1..=255 bytes of UTF-8.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TableName(String);

impl TableName {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.len() > MAX_TABLE_NAME_LEN {
            return Err(Error::InvalidTableName(format!(
                "length {} outside 1..={MAX_TABLE_NAME_LEN}",
                name.len()
            )));
        }
        Ok(TableName(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for TableName {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        TableName::new(value)
    }
}

impl TryFrom<&str> for TableName {
    type Error = Error;
    fn try_from(value: &str) -> Result<Self> {
        TableName::new(value)
    }
}

impl From<TableName> for String {
    fn from(t: TableName) -> String {
        t.0
    }
}

impl fmt::Display for TableName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Categorical feature id.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct EmbeddingKey(pub u64);

impl From<u64> for EmbeddingKey {
    fn from(v: u64) -> Self {
        EmbeddingKey(v)
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Scalar storage type of a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F16 = 1,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            _ => None,
        }
    }
}

/// A dense embedding vector in either canonical F32 or compressed F16 form.
///
/// Construction rejects empty vectors, vectors longer than [`MAX_DIM`] and
/// non-finite values. Equality is bitwise on the stored scalars.
#[derive(Debug, Clone)]
pub enum EmbeddingVector {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

fn check_dim(len: usize) -> Result<()> {
    if len == 0 || len > MAX_DIM {
        return Err(Error::InvalidDim(len));
    }
    Ok(())
}

impl EmbeddingVector {
    pub fn f32(values: Vec<f32>) -> Result<Self> {
        check_dim(values.len())?;
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
        }
        Ok(EmbeddingVector::F32(values))
    }

    pub fn f16(values: Vec<f16>) -> Result<Self> {
        check_dim(values.len())?;
        if let Some((index, value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: value.to_f32(),
            });
        }
        Ok(EmbeddingVector::F16(values))
    }

    pub fn zeros(dim: u16, dtype: DType) -> Result<Self> {
        check_dim(dim as usize)?;
        Ok(match dtype {
            DType::F32 => EmbeddingVector::F32(vec![0.0; dim as usize]),
            DType::F16 => EmbeddingVector::F16(vec![f16::ZERO; dim as usize]),
        })
    }

    pub fn dim(&self) -> u16 {
        match self {
            EmbeddingVector::F32(v) => v.len() as u16,
            EmbeddingVector::F16(v) => v.len() as u16,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            EmbeddingVector::F32(_) => DType::F32,
            EmbeddingVector::F16(_) => DType::F16,
        }
    }

    /// Values widened to f32 (exact for both dtypes).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self {
            EmbeddingVector::F32(v) => v.clone(),
            EmbeddingVector::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
        }
    }

    /// Converts to `dtype`, compressing or widening as needed.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        match (self, dtype) {
            (EmbeddingVector::F32(_), DType::F16) => compress_f16(self),
            (EmbeddingVector::F16(_), DType::F32) => Ok(decompress_f16(self)),
            _ => Ok(self.clone()),
        }
    }

    /// Appends the little-endian scalar payload.
    pub fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            EmbeddingVector::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            EmbeddingVector::F16(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
        }
    }

    /// Parses exactly `dim * dtype.width()` bytes.
    pub fn read_le(bytes: &[u8], dim: u16, dtype: DType) -> Result<Self> {
        debug_assert_eq!(bytes.len(), dim as usize * dtype.width());
        match dtype {
            DType::F32 => EmbeddingVector::f32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F16 => EmbeddingVector::f16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            ),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.dim() as usize * self.dtype().width()
    }
}

impl PartialEq for EmbeddingVector {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (EmbeddingVector::F32(a), EmbeddingVector::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (EmbeddingVector::F16(a), EmbeddingVector::F16(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

impl Eq for EmbeddingVector {}

/// Version 0 is reserved for bulk loads; pipeline updates start at 1.
pub const BULK_LOAD_VERSION: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedEntry {
    pub key: EmbeddingKey,
    pub vector: EmbeddingVector,
    pub version: u64,
}

impl VersionedEntry {
    pub fn new(key: impl Into<EmbeddingKey>, vector: EmbeddingVector, version: u64) -> Self {
        VersionedEntry {
            key: key.into(),
            vector,
            version,
        }
    }
}

/// Per-table schema. Immutable once the table exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableMeta {
    table: TableName,
    dim: u16,
    dtype: DType,
    default_vector: EmbeddingVector,
}

impl TableMeta {
    /// Table with an all-zeros default vector.
    pub fn new(table: TableName, dim: u16, dtype: DType) -> Result<Self> {
        let default_vector = EmbeddingVector::zeros(dim, dtype)?;
        Ok(TableMeta {
            table,
            dim,
            dtype,
            default_vector,
        })
    }

    pub fn with_default(table: TableName, default_vector: EmbeddingVector) -> Self {
        TableMeta {
            table,
            dim: default_vector.dim(),
            dtype: default_vector.dtype(),
            default_vector,
        }
    }

    pub fn table(&self) -> &TableName {
        &self.table
    }

    pub fn dim(&self) -> u16 {
        self.dim
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn default_vector(&self) -> &EmbeddingVector {
        &self.default_vector
    }

    /// Checks that `v` matches this table's dim and dtype.
    pub fn check(&self, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        if v.dtype() != self.dtype {
            return Err(Error::DTypeMismatch {
                expected: self.dtype,
                actual: v.dtype(),
            });
        }
        Ok(())
    }

    pub fn check_entries(&self, entries: &[VersionedEntry]) -> Result<()> {
        entries.iter().try_for_each(|e| self.check(&e.vector))
    }
}

/// A group of updates for one table, the unit of the update pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateBatch {
    table: TableName,
    seq: u64,
    dim: u16,
    dtype: DType,
    entries: Vec<(EmbeddingKey, EmbeddingVector)>,
}

impl UpdateBatch {
    /// Validates that every vector has `dim`/`dtype` and keys are unique.
    pub fn new(
        table: TableName,
        seq: u64,
        dim: u16,
        dtype: DType,
        entries: Vec<(EmbeddingKey, EmbeddingVector)>,
    ) -> Result<Self> {
        check_dim(dim as usize)?;
        let mut seen = HashSet::with_capacity(entries.len());
        for (key, v) in &entries {
            if v.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            if v.dtype() != dtype {
                return Err(Error::DTypeMismatch {
                    expected: dtype,
                    actual: v.dtype(),
                });
            }
            if !seen.insert(*key) {
                return Err(Error::DuplicateKey(*key));
            }
        }
        Ok(UpdateBatch {
            table,
            seq,
            dim,
            dtype,
            entries,
        })
    }

    pub fn table(&self) -> &TableName {
        &self.table
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn dim(&self) -> u16 {
        self.dim
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn entries(&self) -> &[(EmbeddingKey, EmbeddingVector)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries stamped with `version == seq`.
    pub fn to_versioned(&self) -> Vec<VersionedEntry> {
        self.entries
            .iter()
            .map(|(k, v)| VersionedEntry::new(*k, v.clone(), self.seq))
            .collect()
    }

    pub fn into_parts(self) -> (TableName, u64, Vec<(EmbeddingKey, EmbeddingVector)>) {
        (self.table, self.seq, self.entries)
    }
}

/// Result of a batch read against any tier: hits in input order and the
/// keys that were not found, also in input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchGet {
    pub found: Vec<VersionedEntry>,
    pub missing: Vec<EmbeddingKey>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_name_bounds() {
        assert!(TableName::new("").is_err());
        assert!(TableName::new("a".repeat(255)).is_ok());
        assert!(matches!(
            TableName::new("a".repeat(256)),
            Err(Error::InvalidTableName(_))
        ));
    }

    #[test]
    fn vector_validation() {
        assert!(matches!(
            EmbeddingVector::f32(vec![]),
            Err(Error::InvalidDim(0))
        ));
        assert!(EmbeddingVector::f32(vec![0.0; 4097]).is_err());
        assert!(EmbeddingVector::f32(vec![0.0; 4096]).is_ok());
        assert!(matches!(
            EmbeddingVector::f32(vec![1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(EmbeddingVector::f32(vec![f32::INFINITY]).is_err());
        assert!(EmbeddingVector::f16(vec![f16::INFINITY]).is_err());
    }

    #[test]
    fn equality_is_bitwise() {
        let a = EmbeddingVector::f32(vec![0.0]).unwrap();
        let b = EmbeddingVector::f32(vec![-0.0]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, a.clone());
        assert_ne!(a, EmbeddingVector::zeros(1, DType::F16).unwrap());
    }

    #[test]
    fn batch_rejects_mixed_dims_and_duplicates() {
        let t = TableName::new("t").unwrap();
        let v2 = EmbeddingVector::f32(vec![1.0, 2.0]).unwrap();
        let v3 = EmbeddingVector::f32(vec![1.0, 2.0, 3.0]).unwrap();
        let err = UpdateBatch::new(
            t.clone(),
            1,
            2,
            DType::F32,
            vec![(1.into(), v2.clone()), (2.into(), v3)],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::DimMismatch {
                expected: 2,
                actual: 3
            }
        ));

        let err = UpdateBatch::new(
            t.clone(),
            1,
            2,
            DType::F32,
            vec![(1.into(), v2.clone()), (1.into(), v2.clone())],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateKey(EmbeddingKey(1))));

        let err = UpdateBatch::new(t, 1, 2, DType::F16, vec![(1.into(), v2)]).unwrap_err();
        assert!(matches!(err, Error::DTypeMismatch { .. }));
    }

    #[test]
    fn meta_check() {
        let meta = TableMeta::new(TableName::new("t").unwrap(), 2, DType::F32).unwrap();
        assert_eq!(
            meta.default_vector(),
            &EmbeddingVector::f32(vec![0.0, 0.0]).unwrap()
        );
        assert!(meta
            .check(&EmbeddingVector::f32(vec![1.0, 2.0]).unwrap())
            .is_ok());
        assert!(meta
            .check(&EmbeddingVector::f32(vec![1.0]).unwrap())
            .is_err());
    }
}
