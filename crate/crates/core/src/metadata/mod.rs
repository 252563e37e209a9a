//! Run and task registry.
//!
//! Each flow has an append-only JSON-lines event log at
//! `meta/<flow>/events.jsonl`. Writers take an exclusive lock on
//! `meta/<flow>/lock`, catch up on events appended by other processes,
//! check the new event against the materialized state and append it.
//! Readers never lock; a trailing partial line is simply not consumed yet.

pub mod http;
mod log;
mod pathspec;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::cas::{ContentHash, Store, StoreError};

pub use log::MetadataStore;
pub use pathspec::{Pathspec, PathspecError};

/// Name of the environment variable selecting the current namespace.
pub const USER_ENV: &str = "FLOWMILL_USER";

/// Only engine-reserved artifact that may be attached after a task
/// succeeded.
pub const CARD_ARTIFACT: &str = "_card";

#[derive(Debug, thiserror::Error)]
pub enum MetadataError {
    #[error("unknown run {0}")]
    UnknownRun(Pathspec),
    #[error("unknown task {0}")]
    UnknownTask(Pathspec),
    #[error("run {0} is no longer running")]
    RunClosed(Pathspec),
    #[error("illegal status transition for {target}: {from} -> {to}")]
    IllegalTransition { target: Pathspec, from: Status, to: Status },
    #[error("artifact `{name}` of {task} is already bound to another value")]
    ArtifactRebind { task: Pathspec, name: String },
    #[error("artifacts of {0} are sealed")]
    ArtifactsSealed(Pathspec),
    #[error("invalid tag `{0}`")]
    InvalidTag(String),
    #[error("invalid flow name `{0}`")]
    InvalidFlow(String),
    #[error("metadata I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Succeeded | Status::Failed)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pending => "PENDING",
            Status::Running => "RUNNING",
            Status::Succeeded => "SUCCEEDED",
            Status::Failed => "FAILED",
        })
    }
}

impl std::str::FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PENDING" => Ok(Status::Pending),
            "RUNNING" => Ok(Status::Running),
            "SUCCEEDED" => Ok(Status::Succeeded),
            "FAILED" => Ok(Status::Failed),
            _ => Err(format!("unknown status `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    Local,
    SimRemote,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Local => "LOCAL",
            BackendKind::SimRemote => "SIM_REMOTE",
        })
    }
}

/// One level of foreach nesting: this task handles element `index` of a
/// list of `cardinality` elements produced by `step`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ForeachFrame {
    pub step: String,
    pub index: u64,
    pub cardinality: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub flow: String,
    pub run_id: u64,
    pub user: String,
    pub tags: BTreeSet<String>,
    pub status: Status,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    pub code_package: ContentHash,
    pub parameters: BTreeMap<String, ContentHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloned_from: Option<Pathspec>,
}

impl RunRecord {
    pub fn pathspec(&self) -> Pathspec {
        Pathspec::run(self.flow.clone(), self.run_id)
    }

    pub fn namespace(&self) -> &str {
        &self.user
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout: Option<ContentHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<ContentHash>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub flow: String,
    pub run_id: u64,
    pub task_id: u64,
    pub step: String,
    pub foreach_stack: Vec<ForeachFrame>,
    /// Current (or final) attempt number, starting at 1.
    pub attempt: u32,
    pub status: Status,
    pub parents: Vec<u64>,
    pub artifacts: BTreeMap<String, ContentHash>,
    pub backend: BackendKind,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attempts: Vec<AttemptRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloned_from: Option<Pathspec>,
}

impl TaskRecord {
    pub fn pathspec(&self) -> Pathspec {
        Pathspec::task(self.flow.clone(), self.run_id, self.step.clone(), self.task_id)
    }

    /// Artifacts that flow to child tasks (engine-reserved `_` names stay
    /// with the task that produced them).
    pub fn public_artifacts(&self) -> BTreeMap<String, ContentHash> {
        self.artifacts
            .iter()
            .filter(|(k, _)| !k.starts_with('_'))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Extra detail attached to a status change.
#[derive(Debug, Clone, Default)]
pub struct StatusDetail {
    pub attempt: Option<u32>,
    pub exit_code: Option<i32>,
    pub stdout: Option<ContentHash>,
    pub stderr: Option<ContentHash>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryFilter {
    pub flow: Option<String>,
    /// Matches runs tagged `user:<namespace>`.
    pub namespace: Option<String>,
    pub tags: Vec<String>,
    pub status: Option<Status>,
    /// When set the query returns task records of this step; otherwise
    /// run records.
    pub step: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Run(RunRecord),
    Task(TaskRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub run: Pathspec,
    pub checked: usize,
    pub dangling: Vec<(Pathspec, ContentHash)>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.dangling.is_empty()
    }
}

/// `FLOWMILL_USER`, else the login user, else `unknown`.
pub fn default_user() -> String {
    [USER_ENV, "USER", "LOGNAME", "USERNAME"]
        .iter()
        .find_map(|k| std::env::var(k).ok().filter(|v| !v.is_empty()))
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn user_tag(user: &str) -> String {
    format!("user:{user}")
}

/// Checks that every artifact recorded in a run resolves in `store`.
pub fn audit_run(meta: &MetadataStore, store: &Store, flow: &str, run_id: u64) -> Result<AuditReport, MetadataError> {
    let run = meta.run(flow, run_id)?;
    let mut report = AuditReport { run: run.pathspec(), checked: 0, dangling: Vec::new() };
    let params = run.parameters.iter().map(|(n, h)| (run.pathspec(), n, h));
    let tasks = meta.tasks(flow, run_id)?;
    let artifacts = tasks.iter().flat_map(|t| t.artifacts.iter().map(move |(n, h)| (t.pathspec(), n, h)));
    for (owner, name, hash) in params.chain(artifacts) {
        report.checked += 1;
        match store.get(hash) {
            Ok(_) => {}
            Err(StoreError::NotFound(_)) | Err(StoreError::CorruptObject { .. }) => {
                let path = if owner.task_id.is_some() { owner.artifact(name) } else { owner };
                report.dangling.push((path, hash.clone()));
            }
            Err(StoreError::Io { path, source }) => return Err(MetadataError::Io { path, source }),
            Err(e) => return Err(MetadataError::Io { path: PathBuf::new(), source: std::io::Error::other(e.to_string()) }),
        }
    }
    Ok(report)
}
