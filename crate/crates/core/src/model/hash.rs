use super::EmbeddingKey;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ b as u64).wrapping_mul(FNV_PRIME)
    })
}

/// Partitioning hash of a key: FNV-1a over its little-endian bytes.
#[inline]
pub fn key_hash(key: EmbeddingKey) -> u64 {
    fnv1a64(&key.0.to_le_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_offset_basis() {
        assert_eq!(fnv1a64(&[]), 0xcbf29ce484222325);
    }

    // Golden values produced by an independent FNV-1a implementation.
    #[test]
    fn golden_values() {
        assert_eq!(key_hash(EmbeddingKey(0)), 0xa8c7_f832_281a_39c5);
        assert_eq!(key_hash(EmbeddingKey(1)), 0x89cd_3129_1d2a_efa4);
        assert_eq!(key_hash(EmbeddingKey(2)), 0xe6bd_8644_3df8_ce07);
        assert_eq!(key_hash(EmbeddingKey(42)), 0xff3a_dd6b_3789_daef);
        assert_ne!(key_hash(EmbeddingKey(1)), key_hash(EmbeddingKey(2)));
    }

    #[test]
    fn single_byte_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
