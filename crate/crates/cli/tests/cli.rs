use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const STEP_PY: &str = include_str!("../../core/tests/common/step.py");

struct Session {
    dir: tempfile::TempDir,
}

impl Session {
    fn new() -> Session {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("work")).unwrap();
        std::fs::write(dir.path().join("work/step.py"), STEP_PY).unwrap();
        let flow = json!({"name": "Tiny", "parameters": [{"name": "x", "default": 1}], "steps": [
            {"name": "start", "command": "python3 step.py inc x", "next": {"type": "linear", "targets": ["end"]}},
            {"name": "end", "command": "python3 step.py inc x"},
        ]});
        std::fs::write(dir.path().join("work/flow.json"), flow.to_string()).unwrap();
        Session { dir }
    }

    fn work(&self) -> PathBuf {
        self.dir.path().join("work")
    }

    fn run(&self, user: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_flowmill"))
            .args(args)
            .current_dir(self.work())
            .env("FLOWMILL_HOME", self.dir.path().join("home"))
            .env("FLOWMILL_USER", user)
            .env("RUST_LOG", "off")
            .output()
            .unwrap()
    }
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

#[test]
fn json_run_and_show() {
    let s = Session::new();
    let out = s.run("ann", &["--json", "run", "flow.json", "--param", "x=40"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json_of(&out.stdout);
    assert_eq!(doc["run"], "Tiny/1");
    assert_eq!(doc["status"], "SUCCEEDED");

    let out = s.run("ann", &["--json", "show", "Tiny/1/end/2/x"]);
    let doc = json_of(&out.stdout);
    assert_eq!(doc["kind"], "artifact");
    assert_eq!(doc["value"], 42);

    let out = s.run("ann", &["--json", "list", "runs", "Tiny"]);
    assert_eq!(out.status.code(), Some(0));
    json_of(&out.stdout);
}

#[test]
fn exit_codes_separate_user_and_execution_errors() {
    let s = Session::new();
    let missing = s.run("ann", &["--json", "show", "Tiny/9"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(json_of(&missing.stderr)["error"]["exit_code"], 1);

    let usage = s.run("ann", &["--json", "run"]);
    assert_eq!(usage.status.code(), Some(1));
    assert_eq!(json_of(&usage.stderr)["error"]["kind"], "usage");

    let bad_param = s.run("ann", &["run", "flow.json", "--param", "nope=1"]);
    assert_eq!(bad_param.status.code(), Some(1));

    std::fs::write(s.work().join("broken.json"), json!({"name": "Broken", "steps": [
        {"name": "start", "command": "exit 3", "next": {"type": "linear", "targets": ["end"]}},
        {"name": "end", "command": "true"},
    ]}).to_string())
    .unwrap();
    let failed = s.run("ann", &["--json", "run", "broken.json"]);
    assert_eq!(failed.status.code(), Some(2));
    let doc = &json_of(&failed.stderr)["error"]["run"];
    assert_eq!(doc["status"], "FAILED");
    assert_eq!(doc["failed_step"], "start");
}

#[test]
fn namespaces_hide_other_users() {
    let s = Session::new();
    assert_eq!(s.run("ann", &["run", "flow.json"]).status.code(), Some(0));
    assert_eq!(s.run("ann", &["show", "Tiny/1"]).status.code(), Some(0));
    assert_eq!(s.run("bo", &["show", "Tiny/1"]).status.code(), Some(1));
    assert_eq!(s.run("bo", &["show", "--all-namespaces", "Tiny/1"]).status.code(), Some(0));
    let listing = s.run("bo", &["list", "runs", "Tiny"]);
    assert!(listing.stdout.is_empty());
}

#[test]
fn resume_from_start_reproduces_hashes() {
    let s = Session::new();
    s.run("ann", &["run", "flow.json"]);
    let out = s.run("ann", &["resume", "flow.json", "--origin", "Tiny/1", "--from", "start"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let a = json_of(&s.run("ann", &["--json", "show", "Tiny/1/end/2/x"]).stdout);
    let b = json_of(&s.run("ann", &["--json", "show", "Tiny/2/end/2/x"]).stdout);
    assert_eq!(a["hash"], b["hash"]);
}

#[test]
fn card_written_under_home() {
    let s = Session::new();
    s.run("ann", &["run", "flow.json"]);
    let out = s.run("ann", &["card", "Tiny/1"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rel = String::from_utf8(out.stdout).unwrap();
    let path: &Path = Path::new(rel.trim());
    let html = std::fs::read_to_string(s.dir.path().join("home").join(path)).unwrap();
    assert!(html.contains("<time"));
}
