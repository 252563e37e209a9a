//! Run orchestration: validate, package, traverse, launch, persist and
//! advance, plus resuming a past run from a chosen step.

mod fanout;
mod scheduler;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::str::FromStr;

use crate::backends::{
    fail_attempt, Backend, BackendCapacity, BackendError, LocalBackend, SimRemoteBackend, SupervisorCommand,
};
use crate::cas::{package_code, unpack_code, ArtifactValue, Store, StoreError};
use crate::flow::{analyze, FlowSpec, ValidationReport};
use crate::home::Home;
use crate::metadata::{MetadataError, MetadataStore, Pathspec, RunRecord, Status, StatusDetail, TaskRecord};
use crate::protocol::TaskContext;

pub use fanout::{collect_join_inputs, expand_foreach, PendingTask};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("invalid flow: {0}")]
    InvalidFlow(ValidationReport),
    #[error("missing required parameter `{0}`")]
    MissingParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("unknown step `{0}`")]
    UnknownStep(String),
    #[error("unknown run {0}")]
    UnknownRun(Pathspec),
    #[error("nothing to resume in {0}: it has no failed task; name a step to resume from")]
    NothingToResume(Pathspec),
    #[error("flow `{found}` does not match run of flow `{expected}`")]
    FlowMismatch { expected: String, found: String },
    #[error("artifact `{key}` of {task} is not a json list")]
    NotAList { task: Pathspec, key: String },
    #[error("{task} has no artifact `{key}` to fan out over")]
    MissingForeachKey { task: Pathspec, key: String },
    #[error("incomplete fan-in at `{join}`: {detail}")]
    IncompleteFanIn { join: String, detail: String },
    #[error("inconsistent cardinality at `{join}`: {detail}")]
    CardinalityMismatch { join: String, detail: String },
    #[error("parent {0} did not succeed")]
    ParentNotSucceeded(Pathspec),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Card(#[from] crate::cards::CardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendSelector {
    #[default]
    Local,
    SimRemote,
}

impl FromStr for BackendSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(BackendSelector::Local),
            "sim-remote" => Ok(BackendSelector::SimRemote),
            _ => Err(format!("unknown backend `{s}` (expected local or sim-remote)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub home: Home,
    /// Upper bound on concurrently executing tasks per run.
    pub max_parallel: usize,
    pub local_capacity: BackendCapacity,
    pub remote_capacity: BackendCapacity,
    pub supervisor: SupervisorCommand,
    /// Globs (relative to the code root) selecting the files to package.
    pub code_includes: Vec<String>,
}

impl RuntimeConfig {
    pub fn new(home: Home) -> RuntimeConfig {
        RuntimeConfig {
            home,
            max_parallel: std::thread::available_parallelism().map_or(1, |n| n.get()),
            local_capacity: BackendCapacity::default(),
            remote_capacity: BackendCapacity::default(),
            supervisor: SupervisorCommand::default(),
            code_includes: vec!["**".to_string()],
        }
    }
}

/// Per-invocation choices shared by fresh and resumed runs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub backend: BackendSelector,
    pub user: String,
    pub tags: Vec<String>,
    /// Added to every task's environment (decorator environment wins).
    pub extra_env: BTreeMap<String, String>,
}

impl RunOptions {
    pub fn for_user(user: impl Into<String>) -> RunOptions {
        RunOptions { user: user.into(), ..RunOptions::default() }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run: RunRecord,
    pub tasks: Vec<TaskRecord>,
    pub status: Status,
    pub failed_step: Option<String>,
    /// Why the run failed, when it did.
    pub message: Option<String>,
}

impl RunResult {
    /// Tasks of `step` in id order.
    pub fn tasks_of<'a>(&'a self, step: &'a str) -> impl Iterator<Item = &'a TaskRecord> + 'a {
        self.tasks.iter().filter(move |t| t.step == step)
    }
}

#[derive(Debug, Clone)]
pub struct Runtime {
    config: RuntimeConfig,
    store: Store,
    meta: MetadataStore,
    local: LocalBackend,
    remote: SimRemoteBackend,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Runtime, RuntimeError> {
        let store = config.home.store()?;
        let meta = config.home.metadata()?;
        let local = LocalBackend::new(config.home.clone(), store.clone(), meta.clone(), config.local_capacity)?;
        let remote = SimRemoteBackend::new(
            config.home.clone(),
            store.clone(),
            meta.clone(),
            config.remote_capacity,
            config.supervisor.clone(),
        )?;
        Ok(Runtime { config, store, meta, local, remote })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn home(&self) -> &Home {
        &self.config.home
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn metadata(&self) -> &MetadataStore {
        &self.meta
    }

    pub fn local_backend(&self) -> &LocalBackend {
        &self.local
    }

    pub fn remote_backend(&self) -> &SimRemoteBackend {
        &self.remote
    }

    /// Executes a flow from `start`. Task failures yield a FAILED result;
    /// errors are reserved for runs that could not be set up.
    pub fn run_flow(
        &self,
        spec: &FlowSpec,
        code_root: &Path,
        params: &BTreeMap<String, ArtifactValue>,
        opts: &RunOptions,
    ) -> Result<RunResult, RuntimeError> {
        let graph = analyze(spec).map_err(RuntimeError::InvalidFlow)?;
        let values = resolve_parameters(spec, params)?;
        let package = package_code(&self.store, code_root, &self.config.code_includes)?;
        let mut parameters = BTreeMap::new();
        for (name, value) in values {
            parameters.insert(name, self.store.put(&value)?);
        }
        let run = self.meta.register_run(&spec.name, &opts.user, &opts.tags, &package.hash, &parameters, None)?;
        tracing::info!(run = %run.pathspec(), files = package.entry_count, "run started");
        let sched = scheduler::Scheduler::new(self, spec, &graph, run, code_root.to_path_buf(), opts, HashMap::new(), BTreeSet::new());
        sched.run()
    }

    /// Starts a new run that reuses the successful upstream tasks of
    /// `source` and re-executes from `from_step` (default: the step of the
    /// first failed task) with the source run's code and parameters.
    pub fn resume_run(
        &self,
        spec: &FlowSpec,
        source: &Pathspec,
        from_step: Option<&str>,
        opts: &RunOptions,
    ) -> Result<RunResult, RuntimeError> {
        let src = match self.meta.run(&source.flow, source.run_id) {
            Err(MetadataError::UnknownRun(p)) => return Err(RuntimeError::UnknownRun(p)),
            other => other?,
        };
        if spec.name != src.flow {
            return Err(RuntimeError::FlowMismatch { expected: src.flow, found: spec.name.clone() });
        }
        let graph = analyze(spec).map_err(RuntimeError::InvalidFlow)?;
        let src_tasks = self.meta.tasks(&src.flow, src.run_id)?;
        let from = match from_step {
            Some(s) if spec.step(s).is_none() => return Err(RuntimeError::UnknownStep(s.to_string())),
            Some(s) => s.to_string(),
            None => src_tasks
                .iter()
                .filter(|t| t.status == Status::Failed)
                .min_by_key(|t| t.task_id)
                .map(|t| t.step.clone())
                .ok_or_else(|| RuntimeError::NothingToResume(src.pathspec()))?,
        };
        let clone_steps = graph.ancestors(&from);
        let clones: HashMap<_, _> = src_tasks
            .into_iter()
            .filter(|t| t.status == Status::Succeeded && clone_steps.contains(&t.step))
            .map(|t| ((t.step.clone(), t.foreach_stack.clone()), t))
            .collect();

        let run = self.meta.register_run(
            &src.flow,
            &opts.user,
            &opts.tags,
            &src.code_package,
            &src.parameters,
            Some(src.pathspec()),
        )?;
        let code_root = self.home().run_dir(&run.flow, run.run_id).join("code");
        if let Err(e) = unpack_code(&self.store, &src.code_package, &code_root) {
            let detail = StatusDetail { message: Some(e.to_string()), ..Default::default() };
            let _ = self.meta.record_status(&run.pathspec(), Status::Failed, detail);
            return Err(e.into());
        }
        tracing::info!(run = %run.pathspec(), from = %from, cloned = clones.len(), "resume started");
        let sched = scheduler::Scheduler::new(self, spec, &graph, run, code_root, opts, clones, clone_steps);
        sched.run()
    }

    fn backend_for(&self, selector: BackendSelector, remote_step: bool) -> &dyn Backend {
        if remote_step || selector == BackendSelector::SimRemote {
            &self.remote
        } else {
            &self.local
        }
    }
}

/// Declared parameters with given values, else defaults.
fn resolve_parameters(
    spec: &FlowSpec,
    given: &BTreeMap<String, ArtifactValue>,
) -> Result<BTreeMap<String, ArtifactValue>, RuntimeError> {
    if let Some(unknown) = given.keys().find(|k| spec.parameter(k).is_none()) {
        return Err(RuntimeError::UnknownParameter(unknown.clone()));
    }
    let mut out = BTreeMap::new();
    for p in &spec.parameters {
        match given.get(&p.name).or(p.default.as_ref()) {
            Some(v) => {
                out.insert(p.name.clone(), v.clone());
            }
            None if p.required => return Err(RuntimeError::MissingParameter(p.name.clone())),
            None => {}
        }
    }
    Ok(out)
}

/// Runs attempts of one task until one succeeds or `max_attempts` is
/// used up, and returns the final record.
pub fn execute_task(backend: &dyn Backend, meta: &MetadataStore, ctx: &TaskContext) -> Result<TaskRecord, RuntimeError> {
    let mut ctx = ctx.clone();
    for attempt in 1..=ctx.max_attempts.max(1) {
        ctx.attempt = attempt;
        let handle = match backend.submit(&ctx) {
            Ok(h) => h,
            Err(e) => {
                // Rejections and launch failures are not retried.
                tracing::warn!(task = %ctx.pathspec, error = %e, "task could not be started");
                fail_attempt(meta, &ctx, &e.to_string())?;
                break;
            }
        };
        match handle.wait() {
            Ok(c) if c.status == Status::Succeeded => break,
            Ok(c) => tracing::info!(task = %ctx.pathspec, attempt, exit = ?c.exit_code, "attempt failed"),
            Err(e) => {
                tracing::warn!(task = %ctx.pathspec, error = %e, "attempt could not be finalized");
                fail_attempt(meta, &ctx, &e.to_string())?;
            }
        }
    }
    Ok(meta.task(&ctx.pathspec.flow, ctx.pathspec.run_id, ctx.task_id())?)
}

type CloneMap = HashMap<(String, Vec<crate::metadata::ForeachFrame>), TaskRecord>;
