//! SHA-256 helpers for content-derived ids, cache keys, and stage receipts.

use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 over a sequence of fields, each length-prefixed so that
/// field boundaries cannot be forged by concatenation.
pub fn sha256_fields(fields: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for field in fields {
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    hex::encode(hasher.finalize())
}

/// Short (16 hex chars) content-derived identifier from string parts.
///
/// Stable across runs and platforms: ids derived from the same parts are
/// byte-identical, which keeps qrels reproducible across re-ingests.
pub fn short_id(parts: &[&str]) -> String {
    let fields: Vec<&[u8]> = parts.iter().map(|p| p.as_bytes()).collect();
    sha256_fields(&fields)[..16].to_string()
}

/// Hex SHA-256 of a file's contents, streaming.
pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_id_is_stable_and_boundary_safe() {
        assert_eq!(short_id(&["a", "bc"]), short_id(&["a", "bc"]));
        assert_ne!(short_id(&["a", "bc"]), short_id(&["ab", "c"]));
        assert_eq!(short_id(&["doc", "1"]).len(), 16);
    }

    #[test]
    fn sha256_hex_matches_known_vector() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
