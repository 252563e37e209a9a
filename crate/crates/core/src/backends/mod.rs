//! Execution environments for tasks.
//!
//! Both backends admit a task against a capacity ledger before starting it
//! and release the slots once the attempt has been finalized. `Local` runs
//! the command as a direct child of the coordinator; `SimRemote` starts a
//! supervisor process that unpacks the code package into a fresh directory
//! and talks back only through the store and the metadata log.

mod ledger;
mod local;
mod remote;

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::{Arc, Mutex};

use crate::cas::{ArtifactValue, ContentHash, Store, StoreError};
use crate::flow::Resources;
use crate::metadata::{BackendKind, MetadataError, MetadataStore, Pathspec, Status, StatusDetail};
use crate::protocol::{collect_outputs, task_env, OutputError, TaskContext, Workspace, STDERR_ARTIFACT, STDOUT_ARTIFACT};

pub use ledger::{peak_usage, BackendCapacity, CapacityLedger, LifecycleEvent, LifecycleKind, PeakUsage, Permit};
pub use local::LocalBackend;
pub use remote::{supervise, SimRemoteBackend, SupervisorCommand, SupervisorJob};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("request {requested:?} can never fit capacity {capacity:?}")]
    Rejected { requested: Resources, capacity: BackendCapacity },
    #[error("invalid capacity {0:?}")]
    InvalidCapacity(BackendCapacity),
    #[error("code package {0} not found")]
    PackageNotFound(ContentHash),
    #[error("handle of {0} was already awaited")]
    AlreadyReaped(Pathspec),
    #[error("cannot start process for {task}: {source}")]
    Spawn { task: Pathspec, source: std::io::Error },
    #[error("backend I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

impl BackendError {
    fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BackendError {
        let path = path.into();
        move |source| BackendError::Io { path, source }
    }
}

/// How the supervisor of a SIM_REMOTE task ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupervisorStatus {
    /// Local tasks have no supervisor.
    NotApplicable,
    Ok,
    WorkerCrashed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    /// Exit code of the task command, if it exited normally.
    pub exit_code: Option<i32>,
    pub supervisor_status: SupervisorStatus,
    /// Terminal status recorded for the attempt.
    pub status: Status,
}

type Finish = Box<dyn FnOnce() -> Result<Completion, BackendError> + Send>;

/// A launched attempt. Resolves to a terminal status exactly once.
pub struct SubmitHandle {
    pub task: Pathspec,
    pub kind: BackendKind,
    pub supervisor_pid: Option<u32>,
    finish: Mutex<Option<Finish>>,
}

impl std::fmt::Debug for SubmitHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubmitHandle")
            .field("task", &self.task)
            .field("kind", &self.kind)
            .field("supervisor_pid", &self.supervisor_pid)
            .finish()
    }
}

impl SubmitHandle {
    fn new(task: Pathspec, kind: BackendKind, supervisor_pid: Option<u32>, finish: Finish) -> SubmitHandle {
        SubmitHandle { task, kind, supervisor_pid, finish: Mutex::new(Some(finish)) }
    }

    /// Blocks until the attempt is terminal and recorded.
    pub fn wait(&self) -> Result<Completion, BackendError> {
        let finish = self.finish.lock().expect("handle poisoned").take();
        match finish {
            Some(f) => f(),
            None => Err(BackendError::AlreadyReaped(self.task.clone())),
        }
    }
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn ledger(&self) -> &Arc<CapacityLedger>;

    /// Blocks until the request fits; fails at once if it never can.
    fn admit(&self, ctx: &TaskContext) -> Result<Permit, BackendError> {
        self.ledger().acquire(format!("{}#{}", ctx.pathspec, ctx.attempt), ctx.resources)
    }

    /// Starts an admitted attempt. The permit is released when the handle
    /// resolves.
    fn launch(&self, ctx: &TaskContext, permit: Permit) -> Result<SubmitHandle, BackendError>;

    fn submit(&self, ctx: &TaskContext) -> Result<SubmitHandle, BackendError> {
        let permit = self.admit(ctx)?;
        self.launch(ctx, permit)
    }
}

/// Starts `sh -c <command>` with the protocol environment and output
/// redirected to `stdout`/`stderr`.
fn spawn_command(
    ctx: &TaskContext,
    ws: &Workspace,
    cwd: &Path,
    stdout: &Path,
    stderr: &Path,
    die_with_parent: bool,
) -> Result<std::process::Child, BackendError> {
    let out = File::create(stdout).map_err(BackendError::io(stdout))?;
    let err = File::create(stderr).map_err(BackendError::io(stderr))?;
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&ctx.command)
        .current_dir(cwd)
        .envs(task_env(ctx, ws))
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err);
    if die_with_parent {
        set_parent_death_signal(&mut cmd);
    }
    cmd.spawn().map_err(|source| BackendError::Spawn { task: ctx.pathspec.clone(), source })
}

#[cfg(target_os = "linux")]
fn set_parent_death_signal(cmd: &mut Command) {
    use std::os::unix::process::CommandExt;
    // SAFETY: prctl is async-signal-safe and touches no shared state.
    unsafe {
        cmd.pre_exec(|| {
            if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL) == -1 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
}

#[cfg(not(target_os = "linux"))]
fn set_parent_death_signal(_cmd: &mut Command) {}

fn describe_exit(status: ExitStatus) -> String {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return format!("killed by signal {sig}");
        }
    }
    match status.code() {
        Some(c) => format!("exited with code {c}"),
        None => "exited abnormally".to_string(),
    }
}

/// Persists logs and staged outputs of a finished command and records the
/// attempt's terminal status.
fn finalize_attempt(
    store: &Store,
    meta: &MetadataStore,
    ctx: &TaskContext,
    exit: ExitStatus,
    ws: &Workspace,
    stdout: &Path,
    stderr: &Path,
) -> Result<Status, BackendError> {
    let read = |p: &Path| fs::read(p).map_err(BackendError::io(p));
    let out_hash = store.put(&ArtifactValue::Bytes(read(stdout)?))?;
    let err_hash = store.put(&ArtifactValue::Bytes(read(stderr)?))?;
    let mut detail = StatusDetail {
        attempt: Some(ctx.attempt),
        exit_code: exit.code(),
        stdout: Some(out_hash.clone()),
        stderr: Some(err_hash.clone()),
        message: None,
    };
    if exit.success() {
        match collect_outputs(store, &ws.output_dir) {
            Ok(outputs) => {
                let mut artifacts = ctx.inherited();
                artifacts.extend(outputs);
                artifacts.insert(STDOUT_ARTIFACT.to_string(), out_hash);
                artifacts.insert(STDERR_ARTIFACT.to_string(), err_hash);
                meta.record_artifacts(&ctx.pathspec, &artifacts)?;
                meta.record_status(&ctx.pathspec, Status::Succeeded, detail)?;
                return Ok(Status::Succeeded);
            }
            Err(OutputError::Violation(m)) => detail.message = Some(format!("protocol violation: {m}")),
            Err(OutputError::Store(e)) => return Err(e.into()),
        }
    } else {
        detail.message = Some(describe_exit(exit));
    }
    meta.record_status(&ctx.pathspec, Status::Failed, detail)?;
    Ok(Status::Failed)
}

/// Makes sure attempt `ctx.attempt` ends up FAILED, whatever state the
/// task was left in. Used when an attempt died before it could record its
/// own outcome.
pub fn fail_attempt(meta: &MetadataStore, ctx: &TaskContext, message: &str) -> Result<Status, MetadataError> {
    let t = ctx.pathspec.clone();
    let task = meta.task(&t.flow, t.run_id, ctx.task_id())?;
    let detail = || StatusDetail { attempt: Some(ctx.attempt), message: Some(message.to_string()), ..Default::default() };
    match task.status {
        Status::Pending | Status::Running if task.attempt == ctx.attempt => {
            meta.record_status(&t, Status::Failed, detail())?;
            Ok(Status::Failed)
        }
        Status::Failed if task.attempt + 1 == ctx.attempt => {
            meta.record_status(&t, Status::Running, detail())?;
            meta.record_status(&t, Status::Failed, detail())?;
            Ok(Status::Failed)
        }
        other => Ok(other),
    }
}
