//! Content-addressed blob storage for images.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

/// Reference to a stored blob. `url` is set when the backend can hand out a
/// location a remote provider could fetch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    pub key: String,
    pub content_type: String,
    pub byte_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub trait BlobStore: Send + Sync {
    fn put(&self, bytes: &[u8], content_type: &str) -> Result<BlobRef, StorageError>;
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StorageError>;
}

/// Filesystem store, one file per blob named by its SHA-256.
#[derive(Debug, Clone)]
pub struct FsBlobStore {
    root: PathBuf,
    public_base_url: Option<String>,
}

impl FsBlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StorageError::StorageFailure(e.to_string()))?;
        Ok(FsBlobStore {
            root,
            public_base_url: None,
        })
    }

    /// Blobs served elsewhere under `{base}/{key}` get that URL in their refs.
    pub fn with_public_base_url(mut self, base: impl Into<String>) -> Self {
        self.public_base_url = Some(base.into());
        self
    }

    fn path_for(&self, key: &str) -> Result<PathBuf, StorageError> {
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(StorageError::StorageFailure(format!(
                "invalid blob key '{key}'"
            )));
        }
        Ok(self.root.join(key))
    }
}

impl BlobStore for FsBlobStore {
    fn put(&self, bytes: &[u8], content_type: &str) -> Result<BlobRef, StorageError> {
        let key = sha256_hex(bytes);
        let path = self.path_for(&key)?;
        if !path.exists() {
            let tmp = self.root.join(format!(".{key}.tmp"));
            fs::write(&tmp, bytes).map_err(|e| StorageError::StorageFailure(e.to_string()))?;
            fs::rename(&tmp, &path).map_err(|e| StorageError::StorageFailure(e.to_string()))?;
        }
        Ok(BlobRef {
            url: self
                .public_base_url
                .as_ref()
                .map(|b| format!("{}/{key}", b.trim_end_matches('/'))),
            key,
            content_type: content_type.to_string(),
            byte_size: bytes.len() as u64,
        })
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StorageError> {
        let path = self.path_for(key)?;
        match fs::read(path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StorageError::StorageFailure(e.to_string())),
        }
    }
}

/// In-memory store; `set_available(false)` simulates an outage.
#[derive(Debug, Default)]
pub struct MemoryBlobStore {
    blobs: RwLock<HashMap<String, Vec<u8>>>,
    down: AtomicBool,
}

impl MemoryBlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_available(&self, available: bool) {
        self.down.store(!available, Ordering::SeqCst);
    }

    pub fn remove(&self, key: &str) {
        self.blobs.write().remove(key);
    }

    pub fn len(&self) -> usize {
        self.blobs.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<(), StorageError> {
        if self.down.load(Ordering::SeqCst) {
            Err(StorageError::StorageFailure(
                "blob store unavailable".into(),
            ))
        } else {
            Ok(())
        }
    }
}

impl BlobStore for MemoryBlobStore {
    fn put(&self, bytes: &[u8], content_type: &str) -> Result<BlobRef, StorageError> {
        self.check()?;
        let key = sha256_hex(bytes);
        self.blobs.write().insert(key.clone(), bytes.to_vec());
        Ok(BlobRef {
            key,
            content_type: content_type.to_string(),
            byte_size: bytes.len() as u64,
            url: None,
        })
    }

    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, StorageError> {
        self.check()?;
        Ok(self.blobs.read().get(key).cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fs_store_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsBlobStore::new(dir.path()).unwrap();
        let a = store.put(b"hello", "text/plain").unwrap();
        let b = store.put(b"hello", "text/plain").unwrap();
        assert_eq!(a.key, b.key);
        assert_eq!(store.get(&a.key).unwrap().unwrap(), b"hello");
        assert!(store.get(&sha256_hex(b"other")).unwrap().is_none());
        assert!(store.get("../etc/passwd").is_err());
    }

    #[test]
    fn memory_store_outage() {
        let store = MemoryBlobStore::new();
        store.set_available(false);
        assert!(store.put(b"x", "image/png").is_err());
        store.set_available(true);
        assert!(store.put(b"x", "image/png").is_ok());
    }
}
