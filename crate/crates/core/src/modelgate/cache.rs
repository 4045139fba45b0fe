//! On-disk content-addressed response store.
//!
//! Entries are immutable: a key is the digest of everything that determines
//! the response, so a key can only ever map to one value. Writers stage the
//! entry in a temp file and atomically rename it into place, which gives
//! single-writer-per-key semantics even with concurrent writers racing on
//! the same key — whichever rename lands first wins, and both were writing
//! identical bytes anyway. Readers need no locks at all.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::GateError;

/// One stored cache entry. Text completions and embedding vectors share the
/// store; the key derivation keeps their namespaces disjoint.
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Entry {
    Text(String),
    Vector(Vec<f32>),
}

/// Content-addressed cache rooted at a directory.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    /// Opens (creating if needed) a cache rooted at `root`.
    pub fn open(root: &Path) -> Result<Self, GateError> {
        fs::create_dir_all(root)
            .map_err(|source| GateError::Cache { path: root.to_path_buf(), source })?;
        Ok(Self { root: root.to_path_buf() })
    }

    /// Where the cache lives.
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Entry path: two-hex-char fan-out directory keeps listings small.
    fn entry_path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    fn load(&self, key: &str) -> Result<Option<Entry>, GateError> {
        let path = self.entry_path(key);
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(GateError::Cache { path, source }),
        };
        let entry = serde_json::from_slice(&bytes).map_err(|err| GateError::Cache {
            path,
            source: std::io::Error::other(err),
        })?;
        Ok(Some(entry))
    }

    fn store(&self, key: &str, entry: &Entry) -> Result<(), GateError> {
        let path = self.entry_path(key);
        if path.exists() {
            // Entries are immutable; the existing bytes are already correct.
            return Ok(());
        }
        let parent = path.parent().expect("entry path has parent");
        fs::create_dir_all(parent)
            .map_err(|source| GateError::Cache { path: parent.to_path_buf(), source })?;
        let body = serde_json::to_vec(entry).map_err(|err| GateError::Cache {
            path: path.clone(),
            source: std::io::Error::other(err),
        })?;
        // Stage under a writer-unique name, then atomically publish.
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        fs::write(&tmp, &body).map_err(|source| GateError::Cache { path: tmp.clone(), source })?;
        fs::rename(&tmp, &path).map_err(|source| GateError::Cache { path, source })?;
        Ok(())
    }

    pub fn get_text(&self, key: &str) -> Result<Option<String>, GateError> {
        match self.load(key)? {
            Some(Entry::Text(text)) => Ok(Some(text)),
            Some(Entry::Vector(_)) => Err(GateError::Cache {
                path: self.entry_path(key),
                source: std::io::Error::other("cache entry kind mismatch: expected text"),
            }),
            None => Ok(None),
        }
    }

    pub fn put_text(&self, key: &str, text: &str) -> Result<(), GateError> {
        self.store(key, &Entry::Text(text.to_string()))
    }

    pub fn get_vector(&self, key: &str) -> Result<Option<Vec<f32>>, GateError> {
        match self.load(key)? {
            Some(Entry::Vector(vector)) => Ok(Some(vector)),
            Some(Entry::Text(_)) => Err(GateError::Cache {
                path: self.entry_path(key),
                source: std::io::Error::other("cache entry kind mismatch: expected vector"),
            }),
            None => Ok(None),
        }
    }

    pub fn put_vector(&self, key: &str, vector: &[f32]) -> Result<(), GateError> {
        self.store(key, &Entry::Vector(vector.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::digest::sha256_hex;

    #[test]
    fn text_roundtrip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = sha256_hex(b"k1");
        assert!(cache.get_text(&key).unwrap().is_none());
        cache.put_text(&key, "hello").unwrap();
        assert_eq!(cache.get_text(&key).unwrap().as_deref(), Some("hello"));
    }

    #[test]
    fn entries_are_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = sha256_hex(b"k2");
        cache.put_text(&key, "first").unwrap();
        cache.put_text(&key, "second").unwrap();
        assert_eq!(cache.get_text(&key).unwrap().as_deref(), Some("first"));
    }

    #[test]
    fn vector_roundtrip_preserves_f32_bits() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = sha256_hex(b"k3");
        let vector = vec![0.1f32, -2.5, 3.25e-7, f32::MIN_POSITIVE];
        cache.put_vector(&key, &vector).unwrap();
        let loaded = cache.get_vector(&key).unwrap().unwrap();
        assert_eq!(loaded.len(), vector.len());
        for (a, b) in loaded.iter().zip(&vector) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = sha256_hex(b"k4");
        cache.put_text(&key, "text").unwrap();
        assert!(cache.get_vector(&key).is_err());
    }

    #[test]
    fn concurrent_writers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = sha256_hex(b"k5");
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let cache = cache.clone();
                let key = key.clone();
                scope.spawn(move || cache.put_text(&key, "same bytes").unwrap());
            }
        });
        assert_eq!(cache.get_text(&key).unwrap().as_deref(), Some("same bytes"));
    }
}
