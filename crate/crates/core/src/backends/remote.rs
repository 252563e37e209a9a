use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    fail_attempt, finalize_attempt, spawn_command, Backend, BackendCapacity, BackendError, CapacityLedger, Completion,
    Permit, SubmitHandle, SupervisorStatus,
};
use crate::cas::{unpack_code, Store};
use crate::home::Home;
use crate::metadata::{BackendKind, MetadataStore, Status, StatusDetail};
use crate::protocol::{materialize, TaskContext};

/// File in the job directory naming the worker directory in use.
const WORKDIR_FILE: &str = "workdir";
/// Name of the protocol directory inside a worker directory.
pub const PROTOCOL_DIR: &str = ".flowmill";

/// How to start a supervisor: `program args... --home <home> --job <file>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisorCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Default for SupervisorCommand {
    /// `flowmill-supervisor` next to the current executable, else on PATH.
    fn default() -> Self {
        let name = "flowmill-supervisor";
        let beside = std::env::current_exe().ok().and_then(|exe| {
            let dir = exe.parent()?;
            [dir.join(name), dir.parent()?.join(name)].into_iter().find(|p| p.is_file())
        });
        SupervisorCommand { program: beside.unwrap_or_else(|| PathBuf::from(name)), args: Vec::new() }
    }
}

/// What the coordinator hands to a supervisor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervisorJob {
    pub context: TaskContext,
    /// Where the supervisor keeps the command's logs.
    pub job_dir: PathBuf,
}

/// Ships the code package to a fresh directory per attempt and runs the
/// task there under a separate supervisor process.
#[derive(Debug, Clone)]
pub struct SimRemoteBackend {
    home: Home,
    store: Store,
    meta: MetadataStore,
    ledger: Arc<CapacityLedger>,
    supervisor: SupervisorCommand,
}

impl SimRemoteBackend {
    pub fn new(
        home: Home,
        store: Store,
        meta: MetadataStore,
        capacity: BackendCapacity,
        supervisor: SupervisorCommand,
    ) -> Result<Self, BackendError> {
        Ok(SimRemoteBackend { home, store, meta, ledger: CapacityLedger::new(capacity)?, supervisor })
    }
}

impl Backend for SimRemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::SimRemote
    }

    fn ledger(&self) -> &Arc<CapacityLedger> {
        &self.ledger
    }

    fn launch(&self, ctx: &TaskContext, permit: Permit) -> Result<SubmitHandle, BackendError> {
        if !self.store.contains(&ctx.code_package) {
            return Err(BackendError::PackageNotFound(ctx.code_package.clone()));
        }
        let p = &ctx.pathspec;
        let job_dir = self.home.jobs_dir().join(format!("{}-{}-{}-{}", p.flow, p.run_id, ctx.task_id(), ctx.attempt));
        if job_dir.exists() {
            fs::remove_dir_all(&job_dir).map_err(BackendError::io(&job_dir))?;
        }
        fs::create_dir_all(&job_dir).map_err(BackendError::io(&job_dir))?;
        let job = SupervisorJob { context: ctx.clone(), job_dir: job_dir.clone() };
        let job_file = job_dir.join("job.json");
        fs::write(&job_file, serde_json::to_vec(&job).expect("job serializes")).map_err(BackendError::io(&job_file))?;
        let log = job_dir.join("supervisor.log");
        let log_file = File::create(&log).map_err(BackendError::io(&log))?;

        let mut child = Command::new(&self.supervisor.program)
            .args(&self.supervisor.args)
            .arg("--home")
            .arg(self.home.root())
            .arg("--job")
            .arg(&job_file)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log_file)
            .spawn()
            .map_err(|source| BackendError::Spawn { task: p.clone(), source })?;
        let pid = child.id();

        let (meta, ctx) = (self.meta.clone(), ctx.clone());
        let finish = Box::new(move || {
            let exit = child.wait().map_err(BackendError::io(&job_dir))?;
            let task = meta.task(&ctx.pathspec.flow, ctx.pathspec.run_id, ctx.task_id())?;
            let recorded = task.attempts.iter().find(|a| a.attempt == ctx.attempt && a.status.is_terminal()).cloned();
            let completion = match recorded {
                Some(a) if exit.success() => {
                    Completion { exit_code: a.exit_code, supervisor_status: SupervisorStatus::Ok, status: a.status }
                }
                _ => {
                    let reason = format!("supervisor {}", super::describe_exit(exit));
                    let status = fail_attempt(&meta, &ctx, &reason)?;
                    let exit_code = recorded.and_then(|a| a.exit_code);
                    if let Ok(dir) = fs::read_to_string(job_dir.join(WORKDIR_FILE)) {
                        let _ = fs::remove_dir_all(dir.trim());
                    }
                    Completion { exit_code, supervisor_status: SupervisorStatus::WorkerCrashed(reason), status }
                }
            };
            drop(permit);
            if completion.supervisor_status == SupervisorStatus::Ok {
                let _ = fs::remove_dir_all(&job_dir);
            }
            Ok(completion)
        });
        Ok(SubmitHandle::new(p.clone(), BackendKind::SimRemote, Some(pid), finish))
    }
}

/// Body of the supervisor process: unpack, run, persist, clean up.
///
/// The worker directory holds the unpacked package plus `.flowmill/` with
/// the manifest, materialized inputs and the staging directory.
pub fn supervise(home: &Home, job_file: &Path) -> Result<Status, BackendError> {
    let bytes = fs::read(job_file).map_err(BackendError::io(job_file))?;
    let job: SupervisorJob = serde_json::from_slice(&bytes)
        .map_err(|e| BackendError::Io { path: job_file.to_path_buf(), source: std::io::Error::other(e) })?;
    let ctx = &job.context;
    let store = home.store()?;
    let meta = home.metadata()?;

    let remote = home.remote_dir();
    fs::create_dir_all(&remote).map_err(BackendError::io(&remote))?;
    let workdir = tempfile::Builder::new()
        .prefix(&format!("{}-{}-{}-", ctx.pathspec.flow, ctx.pathspec.run_id, ctx.task_id()))
        .tempdir_in(&remote)
        .map_err(BackendError::io(&remote))?;
    let marker = job.job_dir.join(WORKDIR_FILE);
    fs::write(&marker, workdir.path().display().to_string()).map_err(BackendError::io(&marker))?;

    unpack_code(&store, &ctx.code_package, workdir.path())?;
    meta.record_status(&ctx.pathspec, Status::Running, StatusDetail { attempt: Some(ctx.attempt), ..Default::default() })?;
    let ws = materialize(&store, ctx, &workdir.path().join(PROTOCOL_DIR))?;
    let (stdout, stderr) = (job.job_dir.join("stdout.log"), job.job_dir.join("stderr.log"));
    let mut child = spawn_command(ctx, &ws, workdir.path(), &stdout, &stderr, true)?;
    let exit = child.wait().map_err(BackendError::io(workdir.path()))?;
    let status = finalize_attempt(&store, &meta, ctx, exit, &ws, &stdout, &stderr)?;
    workdir.close().map_err(BackendError::io(&remote))?;
    Ok(status)
}
