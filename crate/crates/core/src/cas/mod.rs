//! Content-addressed artifact store.
//!
//! Every value is stored once under the SHA-256 of its canonical encoding,
//! at `objects/<first 2 hex>/<remaining 62 hex>`. Writes go to a temporary
//! file in the same directory and are renamed into place, so concurrent
//! writers of the same value race harmlessly.

mod archive;
mod store;
mod value;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

pub use archive::{
    decode_archive, encode_archive, package_code, unpack_code, ArchiveEntry, CodePackage,
};
pub use store::Store;
pub use value::{canonical_encode, decode_canonical, ArtifactValue};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("object {0} not found")]
    NotFound(ContentHash),
    #[error("object {hash} is corrupt: {reason}")]
    CorruptObject { hash: ContentHash, reason: String },
    #[error("store I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot encode value: {0}")]
    Encoding(String),
    #[error("invalid path: {0}")]
    Path(String),
    #[error("destination {0} is not empty")]
    DestinationNotEmpty(PathBuf),
    #[error("invalid content hash `{0}`")]
    InvalidHash(String),
}

impl StoreError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> StoreError {
        let path = path.into();
        move |source| StoreError::Io { path, source }
    }
}

/// SHA-256 digest rendered as 64 lowercase hex characters.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash(String);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> ContentHash {
        ContentHash(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for ContentHash {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(ContentHash(s.to_string()))
        } else {
            Err(StoreError::InvalidHash(s.to_string()))
        }
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", &self.0[..12])
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
