//! Deterministic code packages.
//!
//! Layout (all integers big-endian):
//!
//! ```text
//! "FMPK" | version: u32 = 1 | entry_count: u64
//! entry* = path_len: u32 | path (UTF-8, '/'-separated, relative)
//!        | exec: u8 (0 or 1) | content_len: u64 | content
//! ```
//!
//! Entries are sorted bytewise by path and carry no timestamps, owners or
//! permission bits other than the executable flag.

use std::fs;
use std::path::{Component, Path};

use globset::{GlobBuilder, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{ArtifactValue, ContentHash, Store, StoreError};

const MAGIC: &[u8; 4] = b"FMPK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub path: String,
    pub executable: bool,
    pub content: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodePackage {
    pub hash: ContentHash,
    pub entry_count: u64,
    pub total_bytes: u64,
}

pub fn encode_archive(entries: &[ArchiveEntry]) -> Vec<u8> {
    let mut sorted: Vec<&ArchiveEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.path.as_bytes().cmp(b.path.as_bytes()));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_be_bytes());
    out.extend_from_slice(&(sorted.len() as u64).to_be_bytes());
    for e in sorted {
        out.extend_from_slice(&(e.path.len() as u32).to_be_bytes());
        out.extend_from_slice(e.path.as_bytes());
        out.push(u8::from(e.executable));
        out.extend_from_slice(&(e.content.len() as u64).to_be_bytes());
        out.extend_from_slice(&e.content);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.buf.len() < n {
            return Err("truncated archive".into());
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<ArchiveEntry>, String> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err("bad archive magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported archive version {version}"));
    }
    let count = r.u64()?;
    let mut entries: Vec<ArchiveEntry> = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| "archive path is not UTF-8".to_string())?
            .to_string();
        if !is_safe_relative(&path) {
            return Err(format!("unsafe archive path `{path}`"));
        }
        if let Some(prev) = entries.last() {
            if prev.path.as_bytes() >= path.as_bytes() {
                return Err("archive entries are not strictly sorted".into());
            }
        }
        let executable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(format!("bad executable flag {b}")),
        };
        let content_len = usize::try_from(r.u64()?).map_err(|_| "entry too large".to_string())?;
        let content = r.take(content_len)?.to_vec();
        entries.push(ArchiveEntry { path, executable, content });
    }
    if !r.buf.is_empty() {
        return Err("trailing bytes after archive".into());
    }
    Ok(entries)
}

fn is_safe_relative(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && path.split('/').all(|c| !c.is_empty() && c != "." && c != "..")
}

fn check_pattern(pattern: &str) -> Result<(), StoreError> {
    let p = Path::new(pattern);
    if p.is_absolute() || p.components().any(|c| matches!(c, Component::ParentDir | Component::Prefix(_))) {
        return Err(StoreError::Path(format!("pattern `{pattern}` escapes the package root")));
    }
    Ok(())
}

/// Packs every regular file under `root` matching one of `includes`
/// (globs relative to `root`; `*` does not cross `/`) and stores the
/// archive as a bytes artifact.
pub fn package_code(store: &Store, root: &Path, includes: &[String]) -> Result<CodePackage, StoreError> {
    let mut builder = GlobSetBuilder::new();
    for pattern in includes {
        check_pattern(pattern)?;
        let glob = GlobBuilder::new(pattern)
            .literal_separator(true)
            .build()
            .map_err(|e| StoreError::Path(format!("bad pattern `{pattern}`: {e}")))?;
        builder.add(glob);
    }
    let globs = builder.build().map_err(|e| StoreError::Path(e.to_string()))?;

    let mut entries = Vec::new();
    for entry in WalkDir::new(root).follow_links(false) {
        let entry = entry.map_err(|e| StoreError::Io { path: root.to_path_buf(), source: e.into() })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let mut parts = Vec::new();
        for c in rel.components() {
            let s = c.as_os_str().to_str().ok_or_else(|| {
                StoreError::Path(format!("non UTF-8 path {}", rel.display()))
            })?;
            parts.push(s);
        }
        let rel = parts.join("/");
        if !globs.is_match(&rel) {
            continue;
        }
        let content = fs::read(entry.path()).map_err(StoreError::io(entry.path()))?;
        let meta = entry.metadata().map_err(|e| StoreError::Io { path: entry.path().to_path_buf(), source: e.into() })?;
        entries.push(ArchiveEntry { path: rel, executable: is_executable(&meta), content });
    }

    let total_bytes = entries.iter().map(|e| e.content.len() as u64).sum();
    let entry_count = entries.len() as u64;
    let hash = store.put(&ArtifactValue::Bytes(encode_archive(&entries)))?;
    Ok(CodePackage { hash, entry_count, total_bytes })
}

#[cfg(unix)]
fn is_executable(meta: &fs::Metadata) -> bool {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o111 != 0
}

#[cfg(not(unix))]
fn is_executable(_meta: &fs::Metadata) -> bool {
    false
}

/// Restores a package into `dest`, which must be missing or empty.
/// Returns the number of files written.
pub fn unpack_code(store: &Store, package: &ContentHash, dest: &Path) -> Result<usize, StoreError> {
    if dest.exists() {
        let mut it = fs::read_dir(dest).map_err(StoreError::io(dest))?;
        if it.next().is_some() {
            return Err(StoreError::DestinationNotEmpty(dest.to_path_buf()));
        }
    }
    let ArtifactValue::Bytes(bytes) = store.get(package)? else {
        return Err(StoreError::CorruptObject { hash: package.clone(), reason: "package is not a bytes object".into() });
    };
    let entries = decode_archive(&bytes)
        .map_err(|reason| StoreError::CorruptObject { hash: package.clone(), reason })?;
    fs::create_dir_all(dest).map_err(StoreError::io(dest))?;
    for e in &entries {
        let path = dest.join(&e.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(StoreError::io(parent))?;
        }
        fs::write(&path, &e.content).map_err(StoreError::io(&path))?;
        set_executable(&path, e.executable)?;
    }
    Ok(entries.len())
}

#[cfg(unix)]
fn set_executable(path: &Path, executable: bool) -> Result<(), StoreError> {
    use std::os::unix::fs::PermissionsExt;
    let mode = if executable { 0o755 } else { 0o644 };
    fs::set_permissions(path, fs::Permissions::from_mode(mode)).map_err(StoreError::io(path))
}

#[cfg(not(unix))]
fn set_executable(_path: &Path, _executable: bool) -> Result<(), StoreError> {
    Ok(())
}
