//! Binary layout of an `UpdateBatch`. All integers little-endian:
//!
//! ```text
//! "HPSU" | version u8 = 1 | name_len u16 | name | seq u64 | count u32 | dim u16 | dtype u8
//! then `count` times: key u64 | dim scalars (f32: 4 bytes, f16: 2 bytes)
//! ```

use std::collections::HashSet;

use super::{DType, EmbeddingKey, EmbeddingVector, TableName, UpdateBatch};
use crate::error::{DecodeError, Error};

pub const MAGIC: [u8; 4] = *b"HPSU";
pub const FORMAT_VERSION: u8 = 1;

const FIXED_HEADER: usize = 4 + 1 + 2 + 8 + 4 + 2 + 1;

pub fn encode_update_batch(batch: &UpdateBatch) -> Vec<u8> {
    let name = batch.table().as_str().as_bytes();
    let per_entry = 8 + batch.dim() as usize * batch.dtype().width();
    let mut out = Vec::with_capacity(FIXED_HEADER + name.len() + per_entry * batch.len());
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&batch.seq().to_le_bytes());
    out.extend_from_slice(&(batch.len() as u32).to_le_bytes());
    out.extend_from_slice(&batch.dim().to_le_bytes());
    out.push(batch.dtype().tag());
    for (key, vector) in batch.entries() {
        out.extend_from_slice(&key.0.to_le_bytes());
        vector.write_le(&mut out);
    }
    out
}

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// u16 length-prefixed table name.
    pub(crate) fn table_name(&mut self) -> Result<TableName, DecodeError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        let s =
            std::str::from_utf8(raw).map_err(|e| DecodeError::InvalidTableName(e.to_string()))?;
        TableName::new(s).map_err(|e| DecodeError::InvalidTableName(e.to_string()))
    }
}

fn vector_err(e: Error) -> DecodeError {
    DecodeError::InvalidVector(e.to_string())
}

/// Inverse of [`encode_update_batch`]. Rejects trailing bytes.
pub fn decode_update_batch(bytes: &[u8]) -> Result<UpdateBatch, DecodeError> {
    let mut cur = Cursor::new(bytes);
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let version = cur.u8()?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let table = cur.table_name()?;
    let seq = cur.u64()?;
    let count = cur.u32()? as usize;
    let dim = cur.u16()?;
    let dtype_tag = cur.u8()?;
    let dtype = DType::from_tag(dtype_tag).ok_or(DecodeError::UnknownDType(dtype_tag))?;
    if dim == 0 || dim as usize > super::MAX_DIM {
        return Err(DecodeError::InvalidVector(format!("dimension {dim}")));
    }
    let payload = dim as usize * dtype.width();
    // Guard the allocation against absurd counts in corrupt input.
    let max_entries = cur.remaining() / (8 + payload);
    let mut entries = Vec::with_capacity(count.min(max_entries));
    let mut seen = HashSet::with_capacity(count.min(max_entries));
    for _ in 0..count {
        let key = EmbeddingKey(cur.u64()?);
        let vector =
            EmbeddingVector::read_le(cur.take(payload)?, dim, dtype).map_err(vector_err)?;
        if !seen.insert(key) {
            return Err(DecodeError::DuplicateKey(key));
        }
        entries.push((key, vector));
    }
    if cur.remaining() != 0 {
        return Err(DecodeError::TrailingBytes(cur.remaining()));
    }
    UpdateBatch::new(table, seq, dim, dtype, entries).map_err(vector_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use half::f16;
    use proptest::prelude::*;

    fn ads_batch(entries: Vec<(EmbeddingKey, EmbeddingVector)>) -> UpdateBatch {
        UpdateBatch::new(TableName::new("ads").unwrap(), 1, 4, DType::F32, entries).unwrap()
    }

    #[test]
    fn empty_batch_is_25_bytes() {
        let bytes = encode_update_batch(&ads_batch(vec![]));
        assert_eq!(bytes.len(), 25);
        assert_eq!(
            bytes,
            [
                b'H', b'P', b'S', b'U', 1, 3, 0, b'a', b'd', b's', 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0,
                0, 4, 0, 0
            ]
        );
    }

    #[test]
    fn one_entry_is_49_bytes() {
        let v = EmbeddingVector::f32(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_update_batch(&ads_batch(vec![(EmbeddingKey(9), v)]));
        assert_eq!(bytes.len(), 49);
        assert_eq!(&bytes[25..33], &9u64.to_le_bytes());
        assert_eq!(&bytes[33..37], &1.0f32.to_le_bytes());
    }

    #[test]
    fn decode_errors() {
        let v = EmbeddingVector::f32(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let good = encode_update_batch(&ads_batch(vec![(EmbeddingKey(9), v)]));

        let mut flipped = good.clone();
        flipped[0] ^= 0xff;
        assert!(matches!(
            decode_update_batch(&flipped),
            Err(DecodeError::BadMagic(_))
        ));

        let truncated = &good[..good.len() - 1];
        assert!(matches!(
            decode_update_batch(truncated),
            Err(DecodeError::Truncated { .. })
        ));

        let mut versioned = good.clone();
        versioned[4] = 2;
        assert_eq!(
            decode_update_batch(&versioned),
            Err(DecodeError::UnsupportedVersion(2))
        );

        let mut trailing = good.clone();
        trailing.push(0);
        assert_eq!(
            decode_update_batch(&trailing),
            Err(DecodeError::TrailingBytes(1))
        );

        let mut bad_dtype = good.clone();
        bad_dtype[24] = 7;
        assert_eq!(
            decode_update_batch(&bad_dtype),
            Err(DecodeError::UnknownDType(7))
        );
    }

    #[test]
    fn duplicate_key_rejected_on_decode() {
        let v = EmbeddingVector::f32(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_update_batch(&ads_batch(vec![
            (EmbeddingKey(1), v.clone()),
            (EmbeddingKey(2), v),
        ]));
        // Overwrite the second key with the first.
        bytes[49..57].copy_from_slice(&1u64.to_le_bytes());
        assert_eq!(
            decode_update_batch(&bytes),
            Err(DecodeError::DuplicateKey(EmbeddingKey(1)))
        );
    }

    #[test]
    fn non_finite_payload_rejected() {
        let v = EmbeddingVector::f32(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = encode_update_batch(&ads_batch(vec![(EmbeddingKey(1), v)]));
        bytes[33..37].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_update_batch(&bytes),
            Err(DecodeError::InvalidVector(_))
        ));
    }

    fn arb_batch() -> impl Strategy<Value = UpdateBatch> {
        (
            "[a-z]{1,12}",
            any::<u64>(),
            1u16..16,
            any::<bool>(),
            prop::collection::hash_set(any::<u64>(), 0..20),
        )
            .prop_flat_map(|(name, seq, dim, half, keys)| {
                let n = keys.len();
                (
                    Just((name, seq, dim, half, keys)),
                    prop::collection::vec(
                        prop::collection::vec(-1000.0f32..1000.0, dim as usize),
                        n,
                    ),
                )
            })
            .prop_map(|((name, seq, dim, half, keys), values)| {
                let dtype = if half { DType::F16 } else { DType::F32 };
                let entries = keys
                    .into_iter()
                    .zip(values)
                    .map(|(k, vals)| {
                        let v = match dtype {
                            DType::F32 => EmbeddingVector::f32(vals).unwrap(),
                            DType::F16 => {
                                EmbeddingVector::f16(vals.into_iter().map(f16::from_f32).collect())
                                    .unwrap()
                            }
                        };
                        (EmbeddingKey(k), v)
                    })
                    .collect();
                UpdateBatch::new(TableName::new(name).unwrap(), seq, dim, dtype, entries).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip(batch in arb_batch()) {
            let bytes = encode_update_batch(&batch);
            prop_assert_eq!(decode_update_batch(&bytes).unwrap(), batch);
        }

        #[test]
        fn any_strict_prefix_is_rejected(batch in arb_batch(), cut in 0usize..1000) {
            let bytes = encode_update_batch(&batch);
            let cut = cut % bytes.len();
            prop_assert!(decode_update_batch(&bytes[..cut]).is_err());
        }
    }
}
