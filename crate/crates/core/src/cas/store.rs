use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{canonical_encode, decode_canonical, ArtifactValue, ContentHash, StoreError};

/// Handle on a store rooted at a directory. Cheap to clone; holds no
/// open files.
#[derive(Debug, Clone)]
pub struct Store {
    objects: PathBuf,
}

impl Store {
    /// Opens (creating if needed) the store whose objects live under
    /// `root/objects`.
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        let objects = root.as_ref().join("objects");
        fs::create_dir_all(&objects).map_err(StoreError::io(&objects))?;
        Ok(Store { objects })
    }

    pub fn object_path(&self, hash: &ContentHash) -> PathBuf {
        let (dir, rest) = hash.as_str().split_at(2);
        self.objects.join(dir).join(rest)
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.object_path(hash).is_file()
    }

    /// Stores `value` unless an identical object already exists.
    pub fn put(&self, value: &ArtifactValue) -> Result<ContentHash, StoreError> {
        self.put_encoded(&canonical_encode(value))
    }

    fn put_encoded(&self, encoded: &[u8]) -> Result<ContentHash, StoreError> {
        let hash = ContentHash::of(encoded);
        let path = self.object_path(&hash);
        if path.is_file() {
            return Ok(hash);
        }
        let dir = path.parent().expect("object path has a parent");
        fs::create_dir_all(dir).map_err(StoreError::io(dir))?;
        let mut tmp = tempfile::Builder::new()
            .prefix(".tmp-")
            .tempfile_in(dir)
            .map_err(StoreError::io(dir))?;
        tmp.write_all(encoded).map_err(StoreError::io(tmp.path()))?;
        tmp.as_file().sync_data().map_err(StoreError::io(tmp.path()))?;
        // A concurrent writer may have renamed the same content into place
        // first; replacing it with identical bytes is harmless.
        tmp.persist(&path).map_err(|e| StoreError::Io { path: path.clone(), source: e.error })?;
        tracing::trace!(%hash, bytes = encoded.len(), "stored object");
        Ok(hash)
    }

    /// Reads an object back and verifies it hashes to `hash`.
    pub fn get(&self, hash: &ContentHash) -> Result<ArtifactValue, StoreError> {
        let path = self.object_path(hash);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => return Err(StoreError::NotFound(hash.clone())),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let actual = ContentHash::of(&bytes);
        if &actual != hash {
            return Err(StoreError::CorruptObject {
                hash: hash.clone(),
                reason: format!("content hashes to {actual}"),
            });
        }
        decode_canonical(&bytes).map_err(|reason| StoreError::CorruptObject { hash: hash.clone(), reason })
    }

    /// Number of stored objects, ignoring in-flight temporary files.
    pub fn object_count(&self) -> Result<usize, StoreError> {
        let mut count = 0;
        for entry in WalkDir::new(&self.objects).min_depth(2).max_depth(2) {
            let entry = entry.map_err(|e| StoreError::Io {
                path: self.objects.clone(),
                source: e.into(),
            })?;
            if entry.file_type().is_file() && !entry.file_name().to_string_lossy().starts_with(".tmp-") {
                count += 1;
            }
        }
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn put_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let v = ArtifactValue::Json(json!({"a": [1, 2]}));
        let h1 = store.put(&v).unwrap();
        assert_eq!(store.object_count().unwrap(), 1);
        let h2 = store.put(&v).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(store.object_count().unwrap(), 1);
        assert_eq!(store.get(&h1).unwrap(), v);
    }

    #[test]
    fn reference_hashes() {
        // Frozen with Python's hashlib over the literal encodings.
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(
            store.put(&ArtifactValue::Bytes(vec![])).unwrap().as_str(),
            "95cc8e8ec552664096b998c62dfd5dfd0a41c96154de6814d918d1ca34bfc225"
        );
        assert_eq!(
            store.put(&ArtifactValue::Json(json!(42))).unwrap().as_str(),
            "d65df06306ae4af0fcf13c7b8d7cf2c4eafff9de7ad46e95a95d54bed9c2e6d2"
        );
        assert_eq!(
            store.put(&ArtifactValue::Json(json!(0.1))).unwrap().as_str(),
            "bab7278be790c987b77be8e44d66240b0c24b91169c38a9edecfabbf50053b02"
        );
    }

    #[test]
    fn one_byte_difference_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.put(&ArtifactValue::Bytes(b"abc".to_vec())).unwrap();
        let b = store.put(&ArtifactValue::Bytes(b"abd".to_vec())).unwrap();
        assert_ne!(a, b);
        assert_eq!(store.object_count().unwrap(), 2);
    }

    #[test]
    fn missing_and_tampered_objects() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let unknown = ContentHash::of(b"never stored");
        assert!(matches!(store.get(&unknown), Err(StoreError::NotFound(_))));

        let h = store.put(&ArtifactValue::Json(json!("payload"))).unwrap();
        fs::write(store.object_path(&h), b"json\n\"tampered\"").unwrap();
        assert!(matches!(store.get(&h), Err(StoreError::CorruptObject { .. })));
    }

    #[test]
    fn concurrent_writers_leave_one_object() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let v = ArtifactValue::Bytes(vec![7; 100_000]);
        let hashes: Vec<ContentHash> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8).map(|_| s.spawn(|| store.put(&v).unwrap())).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(store.object_count().unwrap(), 1);
    }
}
