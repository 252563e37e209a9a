use std::fs;
use std::sync::Arc;

use super::{
    finalize_attempt, spawn_command, Backend, BackendCapacity, BackendError, CapacityLedger, Completion, Permit,
    SubmitHandle, SupervisorStatus,
};
use crate::cas::Store;
use crate::home::Home;
use crate::metadata::{BackendKind, MetadataStore, Status, StatusDetail};
use crate::protocol::{materialize, TaskContext};

/// Runs each task as a child process of the coordinator, with the run's
/// code root as working directory.
#[derive(Debug, Clone)]
pub struct LocalBackend {
    home: Home,
    store: Store,
    meta: MetadataStore,
    ledger: Arc<CapacityLedger>,
}

impl LocalBackend {
    pub fn new(home: Home, store: Store, meta: MetadataStore, capacity: BackendCapacity) -> Result<Self, BackendError> {
        Ok(LocalBackend { home, store, meta, ledger: CapacityLedger::new(capacity)? })
    }
}

impl Backend for LocalBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Local
    }

    fn ledger(&self) -> &Arc<CapacityLedger> {
        &self.ledger
    }

    fn launch(&self, ctx: &TaskContext, permit: Permit) -> Result<SubmitHandle, BackendError> {
        let p = &ctx.pathspec;
        let detail = StatusDetail { attempt: Some(ctx.attempt), ..Default::default() };
        self.meta.record_status(p, Status::Running, detail)?;

        let dir = self
            .home
            .run_dir(&p.flow, p.run_id)
            .join("attempts")
            .join(format!("{}-{}", ctx.task_id(), ctx.attempt));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(BackendError::io(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(BackendError::io(&dir))?;
        let ws = materialize(&self.store, ctx, &dir)?;
        let (stdout, stderr) = (dir.join("stdout.log"), dir.join("stderr.log"));
        let mut child = spawn_command(ctx, &ws, &ctx.code_root, &stdout, &stderr, false)?;

        let (store, meta, ctx) = (self.store.clone(), self.meta.clone(), ctx.clone());
        let finish = Box::new(move || {
            let exit = child.wait().map_err(BackendError::io(&dir))?;
            let status = finalize_attempt(&store, &meta, &ctx, exit, &ws, &stdout, &stderr)?;
            drop(permit);
            if let Err(e) = fs::remove_dir_all(&dir) {
                tracing::debug!(dir = %dir.display(), error = %e, "could not remove attempt directory");
            }
            Ok(Completion { exit_code: exit.code(), supervisor_status: SupervisorStatus::NotApplicable, status })
        });
        Ok(SubmitHandle::new(p.clone(), BackendKind::Local, None, finish))
    }
}
