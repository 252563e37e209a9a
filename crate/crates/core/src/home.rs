//! Layout of a flowmill home directory.
//!
//! ```text
//! objects/              content-addressed store
//! meta/<flow>/          event logs
//! runs/<flow>/<run>/    per-run scratch space (local attempts, resumed code)
//! remote/               fresh worker directories of simulated remote tasks
//! jobs/                 supervisor job files and logs
//! cards/<flow>/         rendered cards
//! ```

use std::path::{Path, PathBuf};

use crate::cas::{Store, StoreError};
use crate::metadata::{MetadataError, MetadataStore};

pub const HOME_ENV: &str = "FLOWMILL_HOME";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Home {
    root: PathBuf,
}

impl Home {
    pub fn new(root: impl Into<PathBuf>) -> Home {
        Home { root: root.into() }
    }

    /// `$FLOWMILL_HOME`, else `~/.flowmill`.
    pub fn from_env() -> Home {
        if let Some(p) = std::env::var_os(HOME_ENV).filter(|p| !p.is_empty()) {
            return Home::new(p);
        }
        let base = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        Home::new(base.join(".flowmill"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> Result<Store, StoreError> {
        Store::open(&self.root)
    }

    pub fn metadata(&self) -> Result<MetadataStore, MetadataError> {
        MetadataStore::open(&self.root)
    }

    pub fn run_dir(&self, flow: &str, run_id: u64) -> PathBuf {
        self.root.join("runs").join(flow).join(run_id.to_string())
    }

    pub fn remote_dir(&self) -> PathBuf {
        self.root.join("remote")
    }

    pub fn jobs_dir(&self) -> PathBuf {
        self.root.join("jobs")
    }

    pub fn card_path(&self, flow: &str, run_id: u64) -> PathBuf {
        self.root.join("cards").join(flow).join(format!("{run_id}.html"))
    }

    /// `path` relative to the home root when it lies inside it.
    pub fn relative<'a>(&self, path: &'a Path) -> &'a Path {
        path.strip_prefix(&self.root).unwrap_or(path)
    }
}
