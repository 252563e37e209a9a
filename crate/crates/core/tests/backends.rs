mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use flowmill_core::backends::{
    peak_usage, Backend, BackendCapacity, BackendError, LocalBackend, SimRemoteBackend, SupervisorStatus,
};
use flowmill_core::cas::{package_code, ArtifactValue, ContentHash};
use flowmill_core::flow::Resources;
use flowmill_core::home::Home;
use flowmill_core::metadata::{BackendKind, MetadataStore, Status};
use flowmill_core::protocol::TaskContext;
use serde_json::json;

struct Rig {
    _home: tempfile::TempDir,
    code: tempfile::TempDir,
    home: Home,
    meta: MetadataStore,
    store: flowmill_core::cas::Store,
    package: ContentHash,
}

impl Rig {
    fn new() -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let code = tempfile::tempdir().unwrap();
        std::fs::write(code.path().join("step.py"), STEP_PY).unwrap();
        std::fs::create_dir(code.path().join("lib")).unwrap();
        std::fs::write(code.path().join("lib/data.txt"), "payload").unwrap();
        let home = Home::new(dir.path());
        let store = home.store().unwrap();
        let meta = home.metadata().unwrap();
        let package = package_code(&store, code.path(), &["**".to_string()]).unwrap().hash;
        meta.register_run("B", "u", &[], &package, &BTreeMap::new(), None).unwrap();
        Rig { _home: dir, code, home, meta, store, package }
    }

    fn task(&self, command: &str, resources: Resources, kind: BackendKind) -> TaskContext {
        let t = self.meta.register_task("B", 1, "start", vec![], vec![], kind).unwrap();
        TaskContext {
            pathspec: t.pathspec(),
            command: command.to_string(),
            env: BTreeMap::new(),
            inputs: vec![],
            auto: BTreeMap::new(),
            parameters: BTreeMap::new(),
            foreach_stack: vec![],
            resources,
            attempt: 1,
            max_attempts: 1,
            code_package: self.package.clone(),
            code_root: self.code.path().to_path_buf(),
        }
    }

    fn local(&self, cap: BackendCapacity) -> LocalBackend {
        LocalBackend::new(self.home.clone(), self.store.clone(), self.meta.clone(), cap).unwrap()
    }

    fn remote(&self) -> SimRemoteBackend {
        SimRemoteBackend::new(self.home.clone(), self.store.clone(), self.meta.clone(), BackendCapacity::default(), supervisor())
            .unwrap()
    }
}

fn cpu(n: u32) -> Resources {
    Resources { cpu: n, memory_mb: 1, gpu: 0 }
}

fn cap(cpu: u32, gpu: u32) -> BackendCapacity {
    BackendCapacity { cpu_slots: cpu, memory_mb: 1024, gpu_slots: gpu }
}

#[test]
fn local_await_once() {
    let rig = Rig::new();
    let backend = rig.local(cap(4, 0));
    let ctx = rig.task("true", cpu(1), BackendKind::Local);
    let h = backend.submit(&ctx).unwrap();
    let c = h.wait().unwrap();
    assert_eq!(c.exit_code, Some(0));
    assert_eq!(c.supervisor_status, SupervisorStatus::NotApplicable);
    assert_eq!(c.status, Status::Succeeded);
    assert!(matches!(h.wait(), Err(BackendError::AlreadyReaped(_))));
}

#[test]
fn gpu_request_rejected_without_gpus() {
    let rig = Rig::new();
    let backend = rig.local(cap(4, 0));
    let ctx = rig.task("true", Resources { cpu: 1, memory_mb: 1, gpu: 1 }, BackendKind::Local);
    assert!(matches!(backend.submit(&ctx), Err(BackendError::Rejected { .. })));
}

#[test]
fn admission_limits_overlap() {
    let rig = Rig::new();
    let backend = rig.local(cap(4, 0));
    let contexts: Vec<_> = (0..5).map(|_| rig.task("sleep 0.1", cpu(2), BackendKind::Local)).collect();
    std::thread::scope(|s| {
        for ctx in &contexts {
            let backend = &backend;
            s.spawn(move || backend.submit(ctx).unwrap().wait().unwrap());
        }
    });
    let log = backend.ledger().lifecycle();
    assert_eq!(log.len(), 10);
    let peak = peak_usage(&log);
    assert!(peak.tasks <= 2, "{peak:?}");
    assert!(peak.cpu <= 4);
}

#[test]
fn remote_worker_sees_only_package_and_protocol_files() {
    let rig = Rig::new();
    let backend = rig.remote();
    let ctx = rig.task("find . -mindepth 1 | sort", cpu(1), BackendKind::SimRemote);
    let h = backend.submit(&ctx).unwrap();
    assert!(h.supervisor_pid.is_some());
    let c = h.wait().unwrap();
    assert_eq!(c.supervisor_status, SupervisorStatus::Ok);
    assert_eq!(c.status, Status::Succeeded);
    let task = rig.meta.task("B", 1, ctx.task_id()).unwrap();
    let ArtifactValue::Bytes(listing) = rig.store.get(&task.artifacts["_stdout"]).unwrap() else { panic!() };
    let listing = String::from_utf8(listing).unwrap();
    let expected = "./.flowmill\n./.flowmill/inputs\n./.flowmill/manifest.json\n./.flowmill/out\n./lib\n./lib/data.txt\n./step.py\n";
    assert_eq!(listing, expected);
    // The worker directory is gone afterwards.
    assert_eq!(std::fs::read_dir(rig.home.remote_dir()).unwrap().count(), 0);
}

#[test]
fn remote_worker_cannot_read_unpackaged_files() {
    let rig = Rig::new();
    // Added after packaging, so only the coordinator's tree has it.
    std::fs::write(rig.code.path().join("late.txt"), "late").unwrap();
    let local = rig.local(cap(4, 0));
    let ctx = rig.task("cat late.txt", cpu(1), BackendKind::Local);
    assert_eq!(local.submit(&ctx).unwrap().wait().unwrap().status, Status::Succeeded);
    let remote = rig.remote();
    let ctx = rig.task("cat late.txt", cpu(1), BackendKind::SimRemote);
    let c = remote.submit(&ctx).unwrap().wait().unwrap();
    assert_eq!(c.status, Status::Failed);
    assert_ne!(c.exit_code, Some(0));
}

#[test]
fn remote_missing_package() {
    let rig = Rig::new();
    let backend = rig.remote();
    let mut ctx = rig.task("true", cpu(1), BackendKind::SimRemote);
    ctx.code_package = ContentHash::of(b"nope");
    assert!(matches!(backend.submit(&ctx), Err(BackendError::PackageNotFound(_))));
}

#[test]
fn killed_supervisor_fails_the_task() {
    let rig = Rig::new();
    let backend = rig.remote();
    let ctx = rig.task("sleep 30", cpu(1), BackendKind::SimRemote);
    let h = backend.submit(&ctx).unwrap();
    let pid = h.supervisor_pid.unwrap();
    // Wait for the worker to start before killing its supervisor.
    let deadline = Instant::now() + Duration::from_secs(10);
    while rig.meta.task("B", 1, ctx.task_id()).unwrap().status != Status::Running {
        assert!(Instant::now() < deadline, "task never started");
        std::thread::sleep(Duration::from_millis(20));
    }
    let started = Instant::now();
    assert_eq!(unsafe { libc::kill(pid as i32, libc::SIGKILL) }, 0);
    let c = h.wait().unwrap();
    assert!(started.elapsed() < Duration::from_secs(10));
    assert!(matches!(c.supervisor_status, SupervisorStatus::WorkerCrashed(_)), "{c:?}");
    assert_eq!(c.status, Status::Failed);
    let task = rig.meta.task("B", 1, ctx.task_id()).unwrap();
    assert_eq!(task.status, Status::Failed);
    assert!(task.attempts[0].message.as_deref().unwrap().contains("supervisor"));
}

#[test]
fn backends_produce_identical_hashes() {
    let env = Env::new();
    let local = env.run(&reference_flow(), &opts("u"));
    let remote = env.run(&reference_flow(), &remote_opts("u"));
    assert_eq!(local.status, Status::Succeeded, "{:?}", local.message);
    assert_eq!(remote.status, Status::Succeeded, "{:?}", remote.message);
    assert!(remote.tasks.iter().all(|t| t.backend == BackendKind::SimRemote));
    assert_eq!(hash_map(&local), hash_map(&remote));
    assert_eq!(env.json_of(end_task(&remote), "scaled"), json!(15));
}

#[test]
fn remote_decorator_overrides_selector() {
    let env = Env::new();
    let mut doc = flow_doc("Mixed", &[("start", py("set x 1"), linear("end")), ("end", py("inc x"), terminal())]);
    doc["steps"][1]["remote"] = json!(true);
    let r = env.run(&parse(&doc), &opts("u"));
    assert_eq!(r.status, Status::Succeeded, "{:?}", r.message);
    assert_eq!(r.tasks_of("start").next().unwrap().backend, BackendKind::Local);
    assert_eq!(end_task(&r).backend, BackendKind::SimRemote);
    assert_eq!(env.json_of(end_task(&r), "x"), json!(2));
}

#[test]
fn run_level_admission_control() {
    let env = Env::with(|c| {
        c.local_capacity = BackendCapacity { cpu_slots: 4, memory_mb: 1 << 20, gpu_slots: 0 };
        c.max_parallel = 16;
    });
    let mut doc = flow_doc(
        "Wide",
        &[
            ("start", py("set items '[1,2,3,4,5,6,7,8]'"), foreach("body", "items")),
            ("body", "sleep 0.1".into(), linear("join")),
            ("join", "true".into(), join_to("end")),
            ("end", "true".into(), terminal()),
        ],
    );
    doc["steps"][1]["resources"] = json!({"cpu": 2});
    let r = env.run(&parse(&doc), &opts("u"));
    assert_eq!(r.status, Status::Succeeded);
    let peak = peak_usage(&env.rt.local_backend().ledger().lifecycle());
    assert!(peak.cpu <= 4 && peak.tasks <= 2, "{peak:?}");
}
