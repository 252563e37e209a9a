//! Read access to past runs by pathspec, scoped to a namespace.

use std::collections::HashMap;

use serde::Serialize;

use crate::cas::{ArtifactValue, ContentHash, Store, StoreError};
use crate::metadata::{user_tag, ForeachFrame, MetadataError, MetadataStore, Pathspec, RunRecord, Status, TaskRecord};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{path} belongs to namespace `{owner}`, not `{namespace}`")]
    NamespaceMismatch { path: Box<Pathspec>, owner: String, namespace: String },
    #[error(transparent)]
    Metadata(MetadataError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<MetadataError> for ClientError {
    fn from(e: MetadataError) -> Self {
        match e {
            MetadataError::UnknownRun(p) | MetadataError::UnknownTask(p) => ClientError::NotFound(p.to_string()),
            MetadataError::InvalidFlow(f) => ClientError::NotFound(format!("flow `{f}`")),
            e => ClientError::Metadata(e),
        }
    }
}

impl From<StoreError> for ClientError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(h) => ClientError::NotFound(format!("object {h}")),
            e => ClientError::Store(e),
        }
    }
}

/// Which runs are visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Namespace {
    /// Runs tagged `user:<name>`.
    User(String),
    /// Every run.
    Global,
}

impl Namespace {
    pub fn admits(&self, run: &RunRecord) -> bool {
        match self {
            Namespace::Global => true,
            Namespace::User(u) => run.tags.contains(&user_tag(u)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Resolved {
    Run { run: RunRecord, tasks: Vec<TaskRecord> },
    Step { run: RunRecord, step: String, tasks: Vec<TaskRecord> },
    Task { task: TaskRecord },
    Artifact {
        pathspec: Pathspec,
        hash: ContentHash,
        #[serde(skip)]
        value: ArtifactValue,
    },
}

/// One task in an ancestry tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineageNode {
    pub task: Pathspec,
    pub step: String,
    pub foreach_stack: Vec<ForeachFrame>,
    pub parents: Vec<LineageNode>,
}

impl LineageNode {
    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        1 + self.parents.iter().map(LineageNode::size).sum::<usize>()
    }

    pub fn leaves(&self) -> usize {
        if self.parents.is_empty() {
            1
        } else {
            self.parents.iter().map(LineageNode::leaves).sum()
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.parents.iter().map(LineageNode::depth).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    store: Store,
    meta: MetadataStore,
}

impl Client {
    pub fn new(store: Store, meta: MetadataStore) -> Client {
        Client { store, meta }
    }

    fn visible_run(&self, flow: &str, run_id: u64, ns: &Namespace) -> Result<RunRecord, ClientError> {
        let run = self.meta.run(flow, run_id)?;
        if !ns.admits(&run) {
            let namespace = match ns {
                Namespace::User(u) => u.clone(),
                Namespace::Global => unreachable!("global namespace admits every run"),
            };
            return Err(ClientError::NamespaceMismatch { path: Box::new(run.pathspec()), owner: run.user.clone(), namespace });
        }
        Ok(run)
    }

    fn task_at(&self, path: &Pathspec) -> Result<TaskRecord, ClientError> {
        let task_id = path.task_id.expect("caller checked");
        let task = match self.meta.task(&path.flow, path.run_id, task_id) {
            Err(MetadataError::UnknownTask(_)) => return Err(ClientError::NotFound(path.to_string())),
            other => other?,
        };
        if Some(&task.step) != path.step.as_ref() {
            return Err(ClientError::NotFound(path.to_string()));
        }
        Ok(task)
    }

    /// The record or value a pathspec names.
    pub fn resolve(&self, path: &Pathspec, ns: &Namespace) -> Result<Resolved, ClientError> {
        let run = self.visible_run(&path.flow, path.run_id, ns)?;
        let Some(step) = &path.step else {
            let tasks = self.meta.tasks(&run.flow, run.run_id)?;
            return Ok(Resolved::Run { run, tasks });
        };
        let Some(_) = path.task_id else {
            let tasks: Vec<TaskRecord> =
                self.meta.tasks(&run.flow, run.run_id)?.into_iter().filter(|t| &t.step == step).collect();
            if tasks.is_empty() {
                return Err(ClientError::NotFound(path.to_string()));
            }
            return Ok(Resolved::Step { run, step: step.clone(), tasks });
        };
        let task = self.task_at(path)?;
        let Some(name) = &path.artifact else {
            return Ok(Resolved::Task { task });
        };
        let hash = task.artifacts.get(name).ok_or_else(|| ClientError::NotFound(path.to_string()))?.clone();
        let value = self.store.get(&hash)?;
        Ok(Resolved::Artifact { pathspec: path.clone(), hash, value })
    }

    /// Decoded value of an artifact pathspec.
    pub fn artifact(&self, path: &Pathspec, ns: &Namespace) -> Result<ArtifactValue, ClientError> {
        match self.resolve(path, ns)? {
            Resolved::Artifact { value, .. } => Ok(value),
            _ => Err(ClientError::NotFound(format!("artifact at {path}"))),
        }
    }

    /// Runs of `flow` visible in `ns`, newest first.
    pub fn runs(&self, flow: &str, ns: &Namespace) -> Result<Vec<RunRecord>, ClientError> {
        Ok(self.meta.runs(flow)?.into_iter().filter(|r| ns.admits(r)).collect())
    }

    pub fn latest_successful_run(&self, flow: &str, ns: &Namespace) -> Result<RunRecord, ClientError> {
        self.runs(flow, ns)?
            .into_iter()
            .filter(|r| r.status == Status::Succeeded)
            .max_by_key(|r| r.run_id)
            .ok_or_else(|| ClientError::NotFound(format!("successful run of `{flow}`")))
    }

    /// Ancestry of the task producing an artifact (or of a task), back to
    /// `start`, rebuilt from parent links.
    pub fn lineage(&self, path: &Pathspec) -> Result<LineageNode, ClientError> {
        if path.task_id.is_none() {
            return Err(ClientError::NotFound(format!("task in {path}")));
        }
        let task = self.task_at(path)?;
        if let Some(name) = &path.artifact {
            if !task.artifacts.contains_key(name) {
                return Err(ClientError::NotFound(path.to_string()));
            }
        }
        let tasks: HashMap<u64, TaskRecord> =
            self.meta.tasks(&path.flow, path.run_id)?.into_iter().map(|t| (t.task_id, t)).collect();
        Ok(build(&tasks, &task))
    }
}

fn build(tasks: &HashMap<u64, TaskRecord>, t: &TaskRecord) -> LineageNode {
    LineageNode {
        task: t.pathspec(),
        step: t.step.clone(),
        foreach_stack: t.foreach_stack.clone(),
        parents: t.parents.iter().filter_map(|p| tasks.get(p)).map(|p| build(tasks, p)).collect(),
    }
}
