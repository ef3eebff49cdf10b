//! Filesystem-safe names for table namespaces.

use crate::model::{fnv1a64, TableName};

const MAX_COMPONENT: usize = 200;

/// Percent-encodes every byte outside `[A-Za-z0-9_-]`. Names whose encoding
/// is too long for a path component are shortened and suffixed with a hash;
/// the real name is always recorded inside the files themselves.
pub(crate) fn encode_component(name: &TableName) -> String {
    let mut out = String::with_capacity(name.as_str().len());
    for &b in name.as_str().as_bytes() {
        if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.len() > MAX_COMPONENT {
        let mut cut = MAX_COMPONENT - 17;
        while !out.is_char_boundary(cut) {
            cut -= 1;
        }
        out.truncate(cut);
        out.push_str(&format!("~{:016x}", fnv1a64(name.as_str().as_bytes())));
    }
    out
}

/// Inverse of [`encode_component`] for names that were not shortened.
pub(crate) fn decode_component(s: &str) -> Option<TableName> {
    if s.contains('~') {
        return None;
    }
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = s.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    TableName::new(String::from_utf8(out).ok()?).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_safety() {
        for n in ["ads", "user/items", "..", "ü-ß", "a b.c"] {
            let t = TableName::new(n).unwrap();
            let enc = encode_component(&t);
            assert!(!enc.contains('/') && !enc.contains('.'));
            assert_eq!(decode_component(&enc), Some(t));
        }
    }

    #[test]
    fn long_names_are_hashed() {
        let a = TableName::new("/".repeat(255)).unwrap();
        let b = TableName::new(format!("{}x", "/".repeat(254))).unwrap();
        let (ea, eb) = (encode_component(&a), encode_component(&b));
        assert!(ea.len() <= MAX_COMPONENT);
        assert_ne!(ea, eb);
        assert_eq!(decode_component(&ea), None);
    }
}
