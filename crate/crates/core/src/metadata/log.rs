use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{
    user_tag, AttemptRecord, BackendKind, ForeachFrame, MetadataError, Pathspec, QueryFilter,
    Record, RunRecord, Status, StatusDetail, TaskRecord, CARD_ARTIFACT,
};
use crate::cas::ContentHash;
use crate::flow::is_flow_name;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
enum Event {
    RunCreated {
        run_id: u64,
        user: String,
        tags: BTreeSet<String>,
        created_at: DateTime<Utc>,
        code_package: ContentHash,
        parameters: BTreeMap<String, ContentHash>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cloned_from: Option<Pathspec>,
    },
    TaskCreated {
        run_id: u64,
        task_id: u64,
        step: String,
        foreach_stack: Vec<ForeachFrame>,
        parents: Vec<u64>,
        backend: BackendKind,
        created_at: DateTime<Utc>,
        /// Present for tasks cloned from an earlier run; such tasks are
        /// created already SUCCEEDED with their artifacts bound.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cloned_from: Option<Pathspec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        artifacts: Option<BTreeMap<String, ContentHash>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attempt: Option<u32>,
    },
    Status {
        run_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        task_id: Option<u64>,
        status: Status,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attempt: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exit_code: Option<i32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stdout: Option<ContentHash>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stderr: Option<ContentHash>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
        at: DateTime<Utc>,
    },
    Artifacts {
        run_id: u64,
        task_id: u64,
        artifacts: BTreeMap<String, ContentHash>,
    },
}

#[derive(Debug, Clone)]
struct RunState {
    record: RunRecord,
    tasks: BTreeMap<u64, TaskRecord>,
}

#[derive(Debug, Default)]
struct FlowState {
    runs: BTreeMap<u64, RunState>,
    /// Bytes of the log consumed so far.
    offset: u64,
}

impl FlowState {
    fn apply(&mut self, flow: &str, event: Event) {
        match event {
            Event::RunCreated { run_id, user, tags, created_at, code_package, parameters, cloned_from } => {
                let record = RunRecord {
                    flow: flow.to_string(),
                    run_id,
                    user,
                    tags,
                    status: Status::Running,
                    created_at,
                    finished_at: None,
                    code_package,
                    parameters,
                    cloned_from,
                };
                self.runs.insert(run_id, RunState { record, tasks: BTreeMap::new() });
            }
            Event::TaskCreated { run_id, task_id, step, foreach_stack, parents, backend, created_at, cloned_from, artifacts, attempt } => {
                let Some(run) = self.runs.get_mut(&run_id) else { return };
                let cloned = cloned_from.is_some();
                run.tasks.insert(
                    task_id,
                    TaskRecord {
                        flow: flow.to_string(),
                        run_id,
                        task_id,
                        step,
                        foreach_stack,
                        attempt: attempt.unwrap_or(1),
                        status: if cloned { Status::Succeeded } else { Status::Pending },
                        parents,
                        artifacts: artifacts.unwrap_or_default(),
                        backend,
                        created_at,
                        started_at: None,
                        finished_at: cloned.then_some(created_at),
                        attempts: Vec::new(),
                        cloned_from,
                    },
                );
            }
            Event::Status { run_id, task_id, status, attempt, exit_code, stdout, stderr, message, at } => {
                let Some(run) = self.runs.get_mut(&run_id) else { return };
                let Some(task_id) = task_id else {
                    run.record.status = status;
                    if status.is_terminal() {
                        run.record.finished_at = Some(at);
                    }
                    return;
                };
                let Some(task) = run.tasks.get_mut(&task_id) else { return };
                let attempt = attempt.unwrap_or(task.attempt);
                task.status = status;
                task.attempt = attempt;
                match status {
                    Status::Running => {
                        task.started_at.get_or_insert(at);
                        task.finished_at = None;
                        task.attempts.push(AttemptRecord {
                            attempt,
                            status,
                            exit_code: None,
                            stdout: None,
                            stderr: None,
                            message: None,
                            started_at: at,
                            finished_at: None,
                        });
                    }
                    Status::Succeeded | Status::Failed => {
                        task.finished_at = Some(at);
                        if let Some(a) = task.attempts.last_mut().filter(|a| a.attempt == attempt && a.finished_at.is_none()) {
                            a.status = status;
                            a.exit_code = exit_code;
                            a.stdout = stdout;
                            a.stderr = stderr;
                            a.message = message;
                            a.finished_at = Some(at);
                        } else {
                            // Failed without ever starting (rejected or reaped).
                            task.attempts.push(AttemptRecord {
                                attempt,
                                status,
                                exit_code,
                                stdout,
                                stderr,
                                message,
                                started_at: at,
                                finished_at: Some(at),
                            });
                        }
                    }
                    Status::Pending => {}
                }
            }
            Event::Artifacts { run_id, task_id, artifacts } => {
                let Some(task) = self.runs.get_mut(&run_id).and_then(|r| r.tasks.get_mut(&task_id)) else { return };
                task.artifacts.extend(artifacts);
            }
        }
    }

    fn run(&self, flow: &str, run_id: u64) -> Result<&RunState, MetadataError> {
        self.runs.get(&run_id).ok_or_else(|| MetadataError::UnknownRun(Pathspec::run(flow, run_id)))
    }

    fn open_run(&self, flow: &str, run_id: u64) -> Result<&RunState, MetadataError> {
        let run = self.run(flow, run_id)?;
        if run.record.status != Status::Running {
            return Err(MetadataError::RunClosed(Pathspec::run(flow, run_id)));
        }
        Ok(run)
    }
}

#[derive(Debug)]
struct FlowLog {
    dir: PathBuf,
    state: Mutex<FlowState>,
}

impl FlowLog {
    fn events_path(&self) -> PathBuf {
        self.dir.join("events.jsonl")
    }

    /// Applies complete lines appended since the last refresh.
    fn refresh(&self, flow: &str, state: &mut FlowState) -> Result<(), MetadataError> {
        let path = self.events_path();
        let mut file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(source) => return Err(MetadataError::Io { path, source }),
        };
        let io = |source| MetadataError::Io { path: path.clone(), source };
        file.seek(SeekFrom::Start(state.offset)).map_err(io)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(io)?;
        let complete = match buf.iter().rposition(|&b| b == b'\n') {
            Some(i) => i + 1,
            None => return Ok(()),
        };
        for line in buf[..complete].split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            match serde_json::from_slice::<Event>(line) {
                Ok(event) => state.apply(flow, event),
                Err(e) => tracing::warn!(flow, error = %e, "skipping unreadable metadata event"),
            }
        }
        state.offset += complete as u64;
        Ok(())
    }
}

/// Handle on the metadata root (`<home>/meta`). Clones share caches.
#[derive(Debug, Clone)]
pub struct MetadataStore {
    root: PathBuf,
    flows: Arc<Mutex<HashMap<String, Arc<FlowLog>>>>,
}

impl MetadataStore {
    pub fn open(root: impl AsRef<Path>) -> Result<MetadataStore, MetadataError> {
        let root = root.as_ref().join("meta");
        fs::create_dir_all(&root).map_err(|source| MetadataError::Io { path: root.clone(), source })?;
        Ok(MetadataStore { root, flows: Arc::default() })
    }

    fn log(&self, flow: &str) -> Result<Arc<FlowLog>, MetadataError> {
        if !is_flow_name(flow) {
            return Err(MetadataError::InvalidFlow(flow.to_string()));
        }
        let mut flows = self.flows.lock().expect("flow cache poisoned");
        Ok(flows
            .entry(flow.to_string())
            .or_insert_with(|| {
                Arc::new(FlowLog { dir: self.root.join(flow), state: Mutex::new(FlowState::default()) })
            })
            .clone())
    }

    fn read<T>(&self, flow: &str, f: impl FnOnce(&FlowState) -> Result<T, MetadataError>) -> Result<T, MetadataError> {
        let log = self.log(flow)?;
        let mut state = log.state.lock().expect("flow state poisoned");
        log.refresh(flow, &mut state)?;
        f(&state)
    }

    /// Runs `f` under the flow's exclusive file lock against up-to-date
    /// state, appends the events it returns and applies them.
    fn write<T>(
        &self,
        flow: &str,
        f: impl FnOnce(&FlowState) -> Result<(Vec<Event>, T), MetadataError>,
    ) -> Result<T, MetadataError> {
        let log = self.log(flow)?;
        let mut state = log.state.lock().expect("flow state poisoned");
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| MetadataError::Io { path, source }
        };
        fs::create_dir_all(&log.dir).map_err(io(&log.dir))?;
        let lock_path = log.dir.join("lock");
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(&lock_path).map_err(io(&lock_path))?;
        lock.lock().map_err(io(&lock_path))?;

        log.refresh(flow, &mut state)?;
        let (events, out) = f(&state)?;
        if !events.is_empty() {
            let path = log.events_path();
            let mut buf = Vec::new();
            // A crashed writer may have left an unterminated line; close it
            // so the new events start on a line of their own.
            let len = fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            if len > state.offset {
                buf.push(b'\n');
            }
            for e in &events {
                serde_json::to_writer(&mut buf, e).expect("event serializes");
                buf.push(b'\n');
            }
            let mut file = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
            file.write_all(&buf).map_err(io(&path))?;
            file.sync_data().map_err(io(&path))?;
            // Apply through refresh so the offset stays consistent with
            // the file contents.
            log.refresh(flow, &mut state)?;
        }
        drop(lock);
        Ok(out)
    }

    /// Allocates the next run id of `flow` and records the run as RUNNING.
    pub fn register_run(
        &self,
        flow: &str,
        user: &str,
        tags: &[String],
        code_package: &ContentHash,
        parameters: &BTreeMap<String, ContentHash>,
        cloned_from: Option<Pathspec>,
    ) -> Result<RunRecord, MetadataError> {
        let mut tag_set = BTreeSet::new();
        for t in tags {
            if t.is_empty() || t.starts_with("user:") {
                return Err(MetadataError::InvalidTag(t.clone()));
            }
            tag_set.insert(t.clone());
        }
        tag_set.insert(user_tag(user));
        let run_id = self.write(flow, |state| {
            let run_id = state.runs.keys().next_back().map_or(1, |id| id + 1);
            let event = Event::RunCreated {
                run_id,
                user: user.to_string(),
                tags: tag_set,
                created_at: Utc::now(),
                code_package: code_package.clone(),
                parameters: parameters.clone(),
                cloned_from,
            };
            Ok((vec![event], run_id))
        })?;
        self.run(flow, run_id)
    }

    pub fn register_task(
        &self,
        flow: &str,
        run_id: u64,
        step: &str,
        foreach_stack: Vec<ForeachFrame>,
        parents: Vec<u64>,
        backend: BackendKind,
    ) -> Result<TaskRecord, MetadataError> {
        self.create_task(flow, run_id, step, foreach_stack, parents, backend, None)
    }

    /// Records a task that reuses the outcome of `source` from another run:
    /// created SUCCEEDED, artifacts bound to the same hashes.
    pub fn clone_task(&self, run_id: u64, source: &TaskRecord, parents: Vec<u64>) -> Result<TaskRecord, MetadataError> {
        self.create_task(
            &source.flow,
            run_id,
            &source.step,
            source.foreach_stack.clone(),
            parents,
            source.backend,
            Some(source),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn create_task(
        &self,
        flow: &str,
        run_id: u64,
        step: &str,
        foreach_stack: Vec<ForeachFrame>,
        parents: Vec<u64>,
        backend: BackendKind,
        source: Option<&TaskRecord>,
    ) -> Result<TaskRecord, MetadataError> {
        let task_id = self.write(flow, |state| {
            let run = state.open_run(flow, run_id)?;
            for p in &parents {
                if !run.tasks.contains_key(p) {
                    return Err(MetadataError::UnknownTask(Pathspec::task(flow, run_id, "?", *p)));
                }
            }
            let task_id = run.tasks.keys().next_back().map_or(1, |id| id + 1);
            let event = Event::TaskCreated {
                run_id,
                task_id,
                step: step.to_string(),
                foreach_stack,
                parents,
                backend,
                created_at: Utc::now(),
                cloned_from: source.map(TaskRecord::pathspec),
                artifacts: source.map(|s| s.artifacts.clone()),
                attempt: source.map(|s| s.attempt),
            };
            Ok((vec![event], task_id))
        })?;
        self.task(flow, run_id, task_id)
    }

    /// Updates the status of a run (`flow/run`) or task (`flow/run/step/task`).
    pub fn record_status(&self, target: &Pathspec, status: Status, detail: StatusDetail) -> Result<(), MetadataError> {
        let flow = target.flow.as_str();
        let run_id = target.run_id;
        self.write(flow, |state| {
            let run = state.run(flow, run_id)?;
            let illegal = |from| MetadataError::IllegalTransition { target: target.clone(), from, to: status };
            let Some(task_id) = target.task_id else {
                if run.record.status != Status::Running || !status.is_terminal() {
                    return Err(illegal(run.record.status));
                }
                let event = Event::Status {
                    run_id,
                    task_id: None,
                    status,
                    attempt: None,
                    exit_code: None,
                    stdout: None,
                    stderr: None,
                    message: detail.message,
                    at: Utc::now(),
                };
                return Ok((vec![event], ()));
            };
            if run.record.status != Status::Running {
                return Err(MetadataError::RunClosed(target.run_prefix()));
            }
            let task = run.tasks.get(&task_id).ok_or_else(|| MetadataError::UnknownTask(target.clone()))?;
            let attempt = detail.attempt.unwrap_or(task.attempt);
            let legal = match (task.status, status) {
                (Status::Pending, Status::Running) => attempt == task.attempt,
                // A failed attempt may be followed by the next one.
                (Status::Failed, Status::Running) => attempt == task.attempt + 1,
                (Status::Running, Status::Succeeded | Status::Failed) => attempt == task.attempt,
                // Rejected by the backend or reaped before starting.
                (Status::Pending, Status::Failed) => attempt == task.attempt,
                _ => false,
            };
            if !legal {
                return Err(illegal(task.status));
            }
            let event = Event::Status {
                run_id,
                task_id: Some(task_id),
                status,
                attempt: Some(attempt),
                exit_code: detail.exit_code,
                stdout: detail.stdout,
                stderr: detail.stderr,
                message: detail.message,
                at: Utc::now(),
            };
            Ok((vec![event], ()))
        })
    }

    /// Binds artifacts of a task. Names are write-once; once the task has
    /// succeeded only the card may still be attached.
    pub fn record_artifacts(&self, task: &Pathspec, artifacts: &BTreeMap<String, ContentHash>) -> Result<(), MetadataError> {
        let flow = task.flow.as_str();
        let task_id = task.task_id.ok_or_else(|| MetadataError::UnknownTask(task.clone()))?;
        self.write(flow, |state| {
            let run = state.run(flow, task.run_id)?;
            let record = run.tasks.get(&task_id).ok_or_else(|| MetadataError::UnknownTask(task.clone()))?;
            let mut new = BTreeMap::new();
            for (name, hash) in artifacts {
                match record.artifacts.get(name) {
                    Some(existing) if existing == hash => {}
                    Some(_) => return Err(MetadataError::ArtifactRebind { task: task.clone(), name: name.clone() }),
                    None => {
                        if record.status == Status::Succeeded && name != CARD_ARTIFACT {
                            return Err(MetadataError::ArtifactsSealed(task.clone()));
                        }
                        new.insert(name.clone(), hash.clone());
                    }
                }
            }
            if new.is_empty() {
                return Ok((Vec::new(), ()));
            }
            Ok((vec![Event::Artifacts { run_id: task.run_id, task_id, artifacts: new }], ()))
        })
    }

    /// Fails every task of a run left PENDING or RUNNING. Returns the
    /// number of tasks reaped.
    pub fn reap(&self, flow: &str, run_id: u64, message: &str) -> Result<usize, MetadataError> {
        self.write(flow, |state| {
            let run = state.run(flow, run_id)?;
            if run.record.status != Status::Running {
                return Ok((Vec::new(), 0));
            }
            let events: Vec<Event> = run
                .tasks
                .values()
                .filter(|t| matches!(t.status, Status::Pending | Status::Running))
                .map(|t| Event::Status {
                    run_id,
                    task_id: Some(t.task_id),
                    status: Status::Failed,
                    attempt: Some(t.attempt),
                    exit_code: None,
                    stdout: None,
                    stderr: None,
                    message: Some(message.to_string()),
                    at: Utc::now(),
                })
                .collect();
            let n = events.len();
            Ok((events, n))
        })
    }

    pub fn flows(&self) -> Result<Vec<String>, MetadataError> {
        let entries = fs::read_dir(&self.root).map_err(|source| MetadataError::Io { path: self.root.clone(), source })?;
        let mut flows: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().join("events.jsonl").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| is_flow_name(n))
            .collect();
        flows.sort();
        Ok(flows)
    }

    pub fn run(&self, flow: &str, run_id: u64) -> Result<RunRecord, MetadataError> {
        self.read(flow, |s| Ok(s.run(flow, run_id)?.record.clone()))
    }

    /// Runs of a flow, newest first.
    pub fn runs(&self, flow: &str) -> Result<Vec<RunRecord>, MetadataError> {
        self.read(flow, |s| Ok(s.runs.values().rev().map(|r| r.record.clone()).collect()))
    }

    /// Tasks of a run in task id order.
    pub fn tasks(&self, flow: &str, run_id: u64) -> Result<Vec<TaskRecord>, MetadataError> {
        self.read(flow, |s| Ok(s.run(flow, run_id)?.tasks.values().cloned().collect()))
    }

    pub fn task(&self, flow: &str, run_id: u64, task_id: u64) -> Result<TaskRecord, MetadataError> {
        self.read(flow, |s| {
            s.run(flow, run_id)?
                .tasks
                .get(&task_id)
                .cloned()
                .ok_or_else(|| MetadataError::UnknownTask(Pathspec::task(flow, run_id, "?", task_id)))
        })
    }

    /// Matching records ordered by flow, run id descending, task id
    /// ascending.
    pub fn query(&self, filter: &QueryFilter) -> Result<Vec<Record>, MetadataError> {
        let flows = match &filter.flow {
            Some(f) => vec![f.clone()],
            None => self.flows()?,
        };
        let mut out = Vec::new();
        for flow in flows {
            self.read(&flow, |state| {
                for run in state.runs.values().rev() {
                    let r = &run.record;
                    if let Some(ns) = &filter.namespace {
                        if !r.tags.contains(&user_tag(ns)) {
                            continue;
                        }
                    }
                    if !filter.tags.iter().all(|t| r.tags.contains(t)) {
                        continue;
                    }
                    match &filter.step {
                        None => {
                            if filter.status.is_none_or(|s| s == r.status) {
                                out.push(Record::Run(r.clone()));
                            }
                        }
                        Some(step) => out.extend(
                            run.tasks
                                .values()
                                .filter(|t| &t.step == step && filter.status.is_none_or(|s| s == t.status))
                                .cloned()
                                .map(Record::Task),
                        ),
                    }
                }
                Ok(())
            })?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkg() -> ContentHash {
        ContentHash::of(b"pkg")
    }

    fn store() -> (tempfile::TempDir, MetadataStore) {
        let dir = tempfile::tempdir().unwrap();
        let meta = MetadataStore::open(dir.path()).unwrap();
        (dir, meta)
    }

    #[test]
    fn run_ids_are_sequential() {
        let (_d, meta) = store();
        let r1 = meta.register_run("F", "alice", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        let r2 = meta.register_run("F", "alice", &["exp".into()], &pkg(), &BTreeMap::new(), None).unwrap();
        assert_eq!((r1.run_id, r2.run_id), (1, 2));
        assert_eq!(r1.status, Status::Running);
        assert!(r2.tags.contains("user:alice") && r2.tags.contains("exp"));
        let other = meta.register_run("G", "alice", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        assert_eq!(other.run_id, 1);
    }

    #[test]
    fn user_tags_cannot_be_supplied() {
        let (_d, meta) = store();
        let err = meta.register_run("F", "alice", &["user:bob".into()], &pkg(), &BTreeMap::new(), None);
        assert!(matches!(err, Err(MetadataError::InvalidTag(_))));
    }

    #[test]
    fn concurrent_registration_has_no_gaps() {
        let (dir, _meta) = store();
        // Separate handles behave like separate processes: only the file
        // lock serializes them.
        let ids: Vec<u64> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..16)
                .map(|_| {
                    let root = dir.path().to_path_buf();
                    s.spawn(move || {
                        let meta = MetadataStore::open(root).unwrap();
                        meta.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap().run_id
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(sorted, (1..=16).collect::<Vec<_>>());
    }

    #[test]
    fn task_lifecycle() {
        let (_d, meta) = store();
        let run = meta.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        let t = meta.register_task("F", run.run_id, "start", vec![], vec![], BackendKind::Local).unwrap();
        assert_eq!((t.task_id, t.status, t.attempt), (1, Status::Pending, 1));
        let p = t.pathspec();
        meta.record_status(&p, Status::Running, StatusDetail::default()).unwrap();
        meta.record_status(&p, Status::Succeeded, StatusDetail { exit_code: Some(0), ..Default::default() }).unwrap();
        let err = meta.record_status(&p, Status::Running, StatusDetail::default());
        assert!(matches!(err, Err(MetadataError::IllegalTransition { from: Status::Succeeded, to: Status::Running, .. })));

        let child = meta
            .register_task("F", run.run_id, "body", vec![ForeachFrame { step: "start".into(), index: 2, cardinality: 3 }], vec![1], BackendKind::Local)
            .unwrap();
        assert_eq!(child.task_id, 2);
        assert_eq!(child.foreach_stack[0].index, 2);
        assert_eq!(child.parents, vec![1]);
    }

    #[test]
    fn retries_bump_attempts() {
        let (_d, meta) = store();
        let run = meta.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        let p = meta.register_task("F", run.run_id, "start", vec![], vec![], BackendKind::Local).unwrap().pathspec();
        for attempt in 1..=3 {
            let d = || StatusDetail { attempt: Some(attempt), ..Default::default() };
            meta.record_status(&p, Status::Running, d()).unwrap();
            meta.record_status(&p, Status::Failed, StatusDetail { exit_code: Some(1), ..d() }).unwrap();
        }
        // Re-running the same attempt number is not allowed.
        let again = StatusDetail { attempt: Some(3), ..Default::default() };
        assert!(meta.record_status(&p, Status::Running, again).is_err());
        let t = meta.task("F", 1, 1).unwrap();
        assert_eq!(t.attempt, 3);
        assert_eq!(t.attempts.len(), 3);
        assert!(t.attempts.iter().all(|a| a.exit_code == Some(1) && a.status == Status::Failed));
    }

    #[test]
    fn artifacts_are_write_once() {
        let (_d, meta) = store();
        let run = meta.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        let p = meta.register_task("F", run.run_id, "start", vec![], vec![], BackendKind::Local).unwrap().pathspec();
        let a = ContentHash::of(b"a");
        let b = ContentHash::of(b"b");
        meta.record_artifacts(&p, &BTreeMap::from([("model".to_string(), a.clone())])).unwrap();
        meta.record_artifacts(&p, &BTreeMap::from([("model".to_string(), a.clone())])).unwrap();
        let err = meta.record_artifacts(&p, &BTreeMap::from([("model".to_string(), b.clone())]));
        assert!(matches!(err, Err(MetadataError::ArtifactRebind { .. })));

        meta.record_status(&p, Status::Running, StatusDetail::default()).unwrap();
        meta.record_status(&p, Status::Succeeded, StatusDetail::default()).unwrap();
        let err = meta.record_artifacts(&p, &BTreeMap::from([("extra".to_string(), b.clone())]));
        assert!(matches!(err, Err(MetadataError::ArtifactsSealed(_))));
        meta.record_artifacts(&p, &BTreeMap::from([(CARD_ARTIFACT.to_string(), b)])).unwrap();
    }

    #[test]
    fn closed_runs_reject_tasks() {
        let (_d, meta) = store();
        let run = meta.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        meta.record_status(&run.pathspec(), Status::Succeeded, StatusDetail::default()).unwrap();
        let err = meta.register_task("F", 1, "start", vec![], vec![], BackendKind::Local);
        assert!(matches!(err, Err(MetadataError::RunClosed(_))));
        assert!(matches!(
            meta.register_task("F", 9, "start", vec![], vec![], BackendKind::Local),
            Err(MetadataError::UnknownRun(_))
        ));
    }

    #[test]
    fn reaper_fails_leftovers() {
        let (_d, meta) = store();
        let run = meta.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        let a = meta.register_task("F", run.run_id, "start", vec![], vec![], BackendKind::Local).unwrap();
        meta.register_task("F", run.run_id, "end", vec![], vec![], BackendKind::Local).unwrap();
        meta.record_status(&a.pathspec(), Status::Running, StatusDetail::default()).unwrap();
        assert_eq!(meta.reap("F", 1, "coordinator shut down").unwrap(), 2);
        assert!(meta.tasks("F", 1).unwrap().iter().all(|t| t.status == Status::Failed));
    }

    #[test]
    fn query_filters() {
        let (_d, meta) = store();
        // 10 runs alternating users; runs 3, 6 and 9 fail.
        for i in 1..=10u64 {
            let user = if i % 2 == 0 { "bob" } else { "alice" };
            let r = meta.register_run("F", user, &[], &pkg(), &BTreeMap::new(), None).unwrap();
            let status = if i % 3 == 0 { Status::Failed } else { Status::Succeeded };
            meta.record_status(&r.pathspec(), status, StatusDetail::default()).unwrap();
        }
        let ids = |f: QueryFilter| -> Vec<u64> {
            meta.query(&f)
                .unwrap()
                .into_iter()
                .map(|r| match r {
                    Record::Run(r) => r.run_id,
                    Record::Task(t) => t.task_id,
                })
                .collect()
        };
        assert_eq!(ids(QueryFilter { status: Some(Status::Failed), ..Default::default() }), vec![9, 6, 3]);
        assert_eq!(
            ids(QueryFilter { flow: Some("F".into()), namespace: Some("alice".into()), ..Default::default() }),
            vec![9, 7, 5, 3, 1]
        );
        assert_eq!(ids(QueryFilter::default()).len(), 10);
        let a = serde_json::to_vec(&meta.query(&QueryFilter::default()).unwrap()).unwrap();
        let b = serde_json::to_vec(&meta.query(&QueryFilter::default()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_trailing_line_is_ignored() {
        let (dir, meta) = store();
        meta.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        let path = dir.path().join("meta/F/events.jsonl");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"ev\":\"run_created\",\"run_").unwrap();
        let fresh = MetadataStore::open(dir.path()).unwrap();
        assert_eq!(fresh.runs("F").unwrap().len(), 1);
        let r = fresh.register_run("F", "u", &[], &pkg(), &BTreeMap::new(), None).unwrap();
        assert_eq!(r.run_id, 2);
        assert_eq!(MetadataStore::open(dir.path()).unwrap().runs("F").unwrap().len(), 2);
    }
}
