#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flowmill_core::backends::{BackendCapacity, SupervisorCommand};
use flowmill_core::cas::{ArtifactValue, ContentHash};
use flowmill_core::flow::{parse_flow, FlowSpec};
use flowmill_core::home::Home;
use flowmill_core::metadata::{Status, TaskRecord};
use flowmill_core::runtime::{BackendSelector, RunOptions, RunResult, Runtime, RuntimeConfig};
use serde_json::{json, Value};

pub const STEP_PY: &str = include_str!("step.py");

/// A scratch home, a code directory holding `step.py` and a runtime.
pub struct Env {
    pub home: tempfile::TempDir,
    pub code: tempfile::TempDir,
    pub rt: Runtime,
}

pub fn supervisor() -> SupervisorCommand {
    SupervisorCommand { program: PathBuf::from(env!("CARGO_BIN_EXE_flowmill-supervisor")), args: Vec::new() }
}

impl Env {
    pub fn new() -> Env {
        Env::with(|_| {})
    }

    pub fn with(configure: impl FnOnce(&mut RuntimeConfig)) -> Env {
        let home = tempfile::tempdir().unwrap();
        let code = tempfile::tempdir().unwrap();
        std::fs::write(code.path().join("step.py"), STEP_PY).unwrap();
        let mut config = RuntimeConfig::new(Home::new(home.path()));
        config.supervisor = supervisor();
        config.max_parallel = 8;
        config.local_capacity = BackendCapacity { cpu_slots: 8, memory_mb: 1 << 20, gpu_slots: 0 };
        config.remote_capacity = config.local_capacity;
        configure(&mut config);
        let rt = Runtime::new(config).unwrap();
        Env { home, code, rt }
    }

    pub fn code_root(&self) -> &Path {
        self.code.path()
    }

    pub fn run(&self, spec: &FlowSpec, opts: &RunOptions) -> RunResult {
        self.run_with(spec, &BTreeMap::new(), opts)
    }

    pub fn run_with(&self, spec: &FlowSpec, params: &BTreeMap<String, ArtifactValue>, opts: &RunOptions) -> RunResult {
        self.rt.run_flow(spec, self.code_root(), params, opts).unwrap()
    }

    pub fn value(&self, hash: &ContentHash) -> ArtifactValue {
        self.rt.store().get(hash).unwrap()
    }

    pub fn json_of(&self, task: &TaskRecord, name: &str) -> Value {
        match self.value(&task.artifacts[name]) {
            ArtifactValue::Json(v) => v,
            other => panic!("{name} is not json: {other:?}"),
        }
    }
}

pub fn opts(user: &str) -> RunOptions {
    RunOptions::for_user(user)
}

pub fn remote_opts(user: &str) -> RunOptions {
    RunOptions { backend: BackendSelector::SimRemote, ..RunOptions::for_user(user) }
}

pub fn py(args: &str) -> String {
    format!("python3 step.py {args}")
}

/// Builds a flow document from `(name, command, next)` triples.
pub fn flow_doc(name: &str, steps: &[(&str, String, Value)]) -> Value {
    let steps: Vec<Value> = steps
        .iter()
        .map(|(n, cmd, next)| {
            let mut s = json!({"name": n, "command": cmd});
            if let Value::Object(extra) = next {
                for (k, v) in extra {
                    s[k] = v.clone();
                }
            }
            s
        })
        .collect();
    json!({"name": name, "steps": steps})
}

pub fn parse(doc: &Value) -> FlowSpec {
    parse_flow(doc.to_string().as_bytes()).unwrap()
}

pub fn linear(target: &str) -> Value {
    json!({"next": {"type": "linear", "targets": [target]}})
}

pub fn split(targets: &[&str]) -> Value {
    json!({"next": {"type": "split", "targets": targets}})
}

pub fn foreach(target: &str, key: &str) -> Value {
    json!({"next": {"type": "foreach", "targets": [target], "foreach_key": key}})
}

pub fn join_to(target: &str) -> Value {
    json!({"join": true, "next": {"type": "linear", "targets": [target]}})
}

pub fn terminal() -> Value {
    json!({})
}

/// start → square each of `items` → sum → end.
pub fn sum_of_squares(items: &[i64]) -> FlowSpec {
    parse(&flow_doc(
        "SumSquares",
        &[
            ("start", py(&format!("set items '{}'", json!(items))), foreach("square", "items")),
            ("square", py("square"), linear("join")),
            ("join", py("sum"), join_to("end")),
            ("end", py("noop"), terminal()),
        ],
    ))
}

/// start sets x=0, a and b each add one, end adds one.
pub fn linear_x() -> FlowSpec {
    parse(&flow_doc(
        "Linear",
        &[
            ("start", py("set x 0"), linear("a")),
            ("a", py("inc x"), linear("end")),
            ("end", py("inc x"), terminal()),
        ],
    ))
}

/// Five deterministic steps with a foreach in the middle.
pub fn reference_flow() -> FlowSpec {
    parse(&flow_doc(
        "Reference",
        &[
            ("start", py("set items '[1,2,3]'"), foreach("square", "items")),
            ("square", py("square"), linear("join")),
            ("join", py("sum"), join_to("scale")),
            ("scale", py("copy total scaled"), linear("end")),
            ("end", py("inc scaled"), terminal()),
        ],
    ))
}

pub fn end_task(r: &RunResult) -> &TaskRecord {
    r.tasks.iter().find(|t| t.step == "end").expect("end task")
}

/// step → sorted list of per-task artifact maps (without logs), keyed by
/// foreach position so runs can be compared.
pub fn hash_map(r: &RunResult) -> BTreeMap<(String, Vec<u64>), BTreeMap<String, ContentHash>> {
    r.tasks
        .iter()
        .filter(|t| t.status == Status::Succeeded)
        .map(|t| {
            let pos = t.foreach_stack.iter().map(|f| f.index).collect();
            let arts = t.artifacts.iter().filter(|(k, _)| !k.starts_with('_')).map(|(k, v)| (k.clone(), v.clone())).collect();
            ((t.step.clone(), pos), arts)
        })
        .collect()
}
