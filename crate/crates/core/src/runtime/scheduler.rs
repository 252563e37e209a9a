use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::mpsc;

use super::{execute_task, CloneMap, PendingTask, RunOptions, RunResult, Runtime, RuntimeError};
use crate::flow::{FlowGraph, FlowSpec, JoinKind, Transition, START};
use crate::metadata::{ForeachFrame, RunRecord, Status, StatusDetail, TaskRecord};
use crate::protocol::TaskContext;
use super::fanout::{collect_join_inputs, expand_foreach};

type Bucket = HashMap<(String, Vec<ForeachFrame>), Vec<TaskRecord>>;

/// The control loop of one run. Owns all scheduling state; task execution
/// happens on worker threads that report back over a channel.
pub(super) struct Scheduler<'a> {
    rt: &'a Runtime,
    spec: &'a FlowSpec,
    graph: &'a FlowGraph,
    run: RunRecord,
    code_root: PathBuf,
    opts: &'a RunOptions,
    clones: CloneMap,
    clone_steps: BTreeSet<String>,
    queue: VecDeque<PendingTask>,
    static_joins: Bucket,
    foreach_joins: Bucket,
    /// First failure: (step, message).
    failure: Option<(String, String)>,
    end_done: bool,
}

impl<'a> Scheduler<'a> {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn new(
        rt: &'a Runtime,
        spec: &'a FlowSpec,
        graph: &'a FlowGraph,
        run: RunRecord,
        code_root: PathBuf,
        opts: &'a RunOptions,
        clones: CloneMap,
        clone_steps: BTreeSet<String>,
    ) -> Self {
        Scheduler {
            rt,
            spec,
            graph,
            run,
            code_root,
            opts,
            clones,
            clone_steps,
            queue: VecDeque::new(),
            static_joins: HashMap::new(),
            foreach_joins: HashMap::new(),
            failure: None,
            end_done: false,
        }
    }

    pub(super) fn run(mut self) -> Result<RunResult, RuntimeError> {
        let max_parallel = self.rt.config.max_parallel.max(1);
        self.queue.push_back(PendingTask {
            step: START.to_string(),
            foreach_stack: Vec::new(),
            parents: Vec::new(),
            inputs: Vec::new(),
            auto: BTreeMap::new(),
        });

        let rt = self.rt;
        let (tx, rx) = mpsc::channel::<(String, Result<TaskRecord, String>)>();
        std::thread::scope(|scope| {
            let mut in_flight = 0usize;
            loop {
                while self.failure.is_none() && in_flight < max_parallel {
                    let Some(pending) = self.queue.pop_front() else { break };
                    match self.start(pending) {
                        Ok(Started::Cloned(record)) => self.advance(record),
                        Ok(Started::Launched(ctx, remote)) => {
                            let tx = tx.clone();
                            let backend = rt.backend_for(self.opts.backend, remote);
                            let meta = &rt.meta;
                            scope.spawn(move || {
                                let step = ctx.step().to_string();
                                let result = catch_unwind(AssertUnwindSafe(|| execute_task(backend, meta, &ctx)))
                                    .unwrap_or_else(|_| {
                                        let _ = crate::backends::fail_attempt(meta, &ctx, "task executor panicked");
                                        meta.task(&ctx.pathspec.flow, ctx.pathspec.run_id, ctx.task_id())
                                            .map_err(RuntimeError::from)
                                    })
                                    .map_err(|e| e.to_string());
                                let _ = tx.send((step, result));
                            });
                            in_flight += 1;
                        }
                        Err((step, message)) => self.fail(step, message),
                    }
                }
                if in_flight == 0 {
                    break;
                }
                let (step, result) = rx.recv().expect("a worker is still running");
                in_flight -= 1;
                match result {
                    Ok(record) => self.advance(record),
                    Err(message) => self.fail(step, message),
                }
            }
        });
        self.finish()
    }

    /// Registers a pending task, either as a clone of the source run or as
    /// a fresh task ready to execute.
    fn start(&mut self, p: PendingTask) -> Result<Started, (String, String)> {
        let meta = &self.rt.meta;
        let err = |e: RuntimeError| (p.step.clone(), e.to_string());
        if self.clone_steps.contains(&p.step) {
            if let Some(source) = self.clones.remove(&(p.step.clone(), p.foreach_stack.clone())) {
                let record = meta.clone_task(self.run.run_id, &source, p.parents.clone()).map_err(|e| err(e.into()))?;
                return Ok(Started::Cloned(record));
            }
        }
        let step = self.spec.step(&p.step).expect("validated flows only route to declared steps");
        let remote = step.decorators.remote;
        let kind = self.rt.backend_for(self.opts.backend, remote).kind();
        let record = meta
            .register_task(&self.run.flow, self.run.run_id, &p.step, p.foreach_stack.clone(), p.parents.clone(), kind)
            .map_err(|e| err(e.into()))?;
        let mut env = self.opts.extra_env.clone();
        env.extend(step.decorators.environment.iter().map(|(k, v)| (k.clone(), v.clone())));
        let is_start = p.step == START;
        let ctx = TaskContext {
            pathspec: record.pathspec(),
            command: step.command.clone(),
            env,
            inputs: p.inputs,
            auto: if is_start { BTreeMap::new() } else { p.auto },
            parameters: if is_start { self.run.parameters.clone() } else { BTreeMap::new() },
            foreach_stack: p.foreach_stack,
            resources: step.decorators.resources,
            attempt: 1,
            max_attempts: step.decorators.max_attempts,
            code_package: self.run.code_package.clone(),
            code_root: self.code_root.clone(),
        };
        Ok(Started::Launched(ctx, remote))
    }

    fn fail(&mut self, step: String, message: String) {
        tracing::warn!(step = %step, message = %message, "run failing");
        if self.failure.is_none() {
            self.failure = Some((step, message));
        }
    }

    /// Handles a finished task: enqueue its successors, or record failure.
    fn advance(&mut self, record: TaskRecord) {
        if record.status != Status::Succeeded {
            let message = record
                .attempts
                .last()
                .and_then(|a| a.message.clone())
                .unwrap_or_else(|| format!("task {} failed", record.pathspec()));
            self.fail(record.step.clone(), message);
            return;
        }
        let step_name = record.step.clone();
        if let Err(e) = self.successors(record) {
            self.fail(step_name, e.to_string());
        }
    }

    fn successors(&mut self, record: TaskRecord) -> Result<(), RuntimeError> {
        let step = self.spec.step(&record.step).expect("declared step");
        match &step.transition {
            None => self.end_done = true,
            Some(Transition::Linear(t)) => self.route(t, &record)?,
            Some(Transition::Split(targets)) => {
                for t in targets {
                    self.route(t, &record)?;
                }
            }
            Some(Transition::Foreach { target, foreach_key }) => {
                let children = expand_foreach(&self.rt.store, &record, target, foreach_key)?;
                if children.is_empty() {
                    let join = self.graph.join_of(&record.step).expect("validated foreach has a join");
                    self.queue.push_back(PendingTask {
                        step: join.to_string(),
                        foreach_stack: record.foreach_stack.clone(),
                        parents: vec![record.task_id],
                        inputs: Vec::new(),
                        auto: BTreeMap::new(),
                    });
                } else {
                    self.queue.extend(children);
                }
            }
        }
        Ok(())
    }

    /// Sends a finished parent along one edge. Joins wait until all their
    /// parents have arrived.
    fn route(&mut self, target: &str, parent: &TaskRecord) -> Result<(), RuntimeError> {
        let (bucket, key, expected) = match self.graph.join_kind(target) {
            Some(JoinKind::Static { branches, .. }) => {
                let key = (target.to_string(), parent.foreach_stack.clone());
                (&mut self.static_joins, key, branches.len() as u64)
            }
            Some(JoinKind::Foreach { .. }) => {
                let frame = parent.foreach_stack.last().ok_or_else(|| RuntimeError::CardinalityMismatch {
                    join: target.to_string(),
                    detail: format!("task {} has no foreach frame", parent.task_id),
                })?;
                let prefix = parent.foreach_stack[..parent.foreach_stack.len() - 1].to_vec();
                (&mut self.foreach_joins, (target.to_string(), prefix), frame.cardinality)
            }
            None => {
                self.queue.push_back(PendingTask::child_of(target, parent));
                return Ok(());
            }
        };
        let arrived = bucket.entry(key.clone()).or_default();
        arrived.push(parent.clone());
        if (arrived.len() as u64) < expected {
            return Ok(());
        }
        let parents = bucket.remove(&key).expect("bucket just filled");
        let (inputs, auto) = collect_join_inputs(self.graph, target, &parents)?;
        self.queue.push_back(PendingTask {
            step: target.to_string(),
            foreach_stack: key.1,
            parents: inputs.iter().map(|b| b.parent_task).collect(),
            inputs,
            auto,
        });
        Ok(())
    }

    fn finish(self) -> Result<RunResult, RuntimeError> {
        let meta = &self.rt.meta;
        let run_path = self.run.pathspec();
        let succeeded = self.failure.is_none() && self.end_done;
        let (failed_step, message) = match self.failure {
            Some((s, m)) => (Some(s), Some(m)),
            None if !succeeded => (None, Some("run ended before reaching end".to_string())),
            None => (None, None),
        };
        if !succeeded {
            let reaped = meta.reap(&self.run.flow, self.run.run_id, "run failed")?;
            if reaped > 0 {
                tracing::warn!(run = %run_path, reaped, "reaped unfinished tasks");
            }
        }
        let status = if succeeded { Status::Succeeded } else { Status::Failed };
        let detail = StatusDetail { message: message.clone(), ..Default::default() };
        meta.record_status(&run_path, status, detail)?;
        let run = meta.run(&self.run.flow, self.run.run_id)?;
        let mut tasks = meta.tasks(&self.run.flow, self.run.run_id)?;
        if succeeded && self.spec.steps.values().any(|s| s.decorators.card) {
            let html = crate::cards::render_card(&self.rt.store, &run, &tasks, self.spec)?;
            crate::cards::store_card(&self.rt.store, meta, &run, &tasks, &html)?;
            tasks = meta.tasks(&self.run.flow, self.run.run_id)?;
        }
        tracing::info!(run = %run_path, %status, "run finished");
        Ok(RunResult { run, tasks, status, failed_step, message })
    }
}

enum Started {
    Cloned(TaskRecord),
    Launched(TaskContext, bool),
}
