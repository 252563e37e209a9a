//! The contract between the engine and a step's command.
//!
//! A task is started with the environment variables below. Its inputs are
//! described by a JSON manifest whose artifact payloads are materialized
//! as files (json artifacts as canonical JSON text, bytes raw). Every
//! `<name>.json` or `<name>.bin` file the command leaves in the output
//! directory becomes artifact `<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cas::{ArtifactValue, ContentHash, Store, StoreError};
use crate::flow::{is_artifact_name, Resources};
use crate::metadata::{ForeachFrame, Pathspec};

pub const ENV_FLOW: &str = "FLOWMILL_FLOW";
pub const ENV_RUN_ID: &str = "FLOWMILL_RUN_ID";
pub const ENV_STEP: &str = "FLOWMILL_STEP";
pub const ENV_TASK_ID: &str = "FLOWMILL_TASK_ID";
pub const ENV_ATTEMPT: &str = "FLOWMILL_ATTEMPT";
pub const ENV_INPUT_MANIFEST: &str = "FLOWMILL_INPUT_MANIFEST";
pub const ENV_OUTPUT_DIR: &str = "FLOWMILL_OUTPUT_DIR";

pub const STDOUT_ARTIFACT: &str = "_stdout";
pub const STDERR_ARTIFACT: &str = "_stderr";

/// Outputs of one parent task as seen by a child.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputBinding {
    pub parent_task: u64,
    pub artifacts: BTreeMap<String, ContentHash>,
    /// The list element bound to a foreach child.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreach_item: Option<ContentHash>,
}

/// Everything needed to run one attempt of a task, on any backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskContext {
    pub pathspec: Pathspec,
    pub command: String,
    /// Run-level and decorator environment; protocol variables are added
    /// at launch.
    pub env: BTreeMap<String, String>,
    pub inputs: Vec<InputBinding>,
    /// Artifacts inherited unchanged from the parent(s).
    pub auto: BTreeMap<String, ContentHash>,
    /// Only set for `start`.
    pub parameters: BTreeMap<String, ContentHash>,
    pub foreach_stack: Vec<ForeachFrame>,
    pub resources: Resources,
    pub attempt: u32,
    pub max_attempts: u32,
    pub code_package: ContentHash,
    /// Working directory for local execution.
    pub code_root: PathBuf,
}

impl TaskContext {
    pub fn task_id(&self) -> u64 {
        self.pathspec.task_id.expect("task context addresses a task")
    }

    pub fn step(&self) -> &str {
        self.pathspec.step.as_deref().expect("task context addresses a task")
    }

    /// Artifacts the task starts out with before its own outputs are
    /// applied.
    pub fn inherited(&self) -> BTreeMap<String, ContentHash> {
        let mut out = self.auto.clone();
        out.extend(self.parameters.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestArtifact {
    pub hash: ContentHash,
    pub path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestInput {
    pub parent_task: u64,
    pub artifacts: BTreeMap<String, ManifestArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreach_item: Option<ManifestArtifact>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InputManifest {
    pub inputs: Vec<ManifestInput>,
    pub auto: BTreeMap<String, ManifestArtifact>,
    pub parameters: BTreeMap<String, ManifestArtifact>,
}

/// Paths of a materialized attempt.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
}

/// Writes `dir/manifest.json`, the referenced payloads under
/// `dir/inputs/` and an empty `dir/out/`.
pub fn materialize(store: &Store, ctx: &TaskContext, dir: &Path) -> Result<Workspace, StoreError> {
    let inputs_dir = dir.join("inputs");
    let output_dir = dir.join("out");
    fs::create_dir_all(&inputs_dir).map_err(StoreError::io(&inputs_dir))?;
    fs::create_dir_all(&output_dir).map_err(StoreError::io(&output_dir))?;

    let file_for = |hash: &ContentHash| -> Result<ManifestArtifact, StoreError> {
        let value = store.get(hash)?;
        let ext = match value {
            ArtifactValue::Json(_) => "json",
            ArtifactValue::Bytes(_) => "bin",
        };
        let path = inputs_dir.join(format!("{hash}.{ext}"));
        if !path.exists() {
            fs::write(&path, value.payload()).map_err(StoreError::io(&path))?;
        }
        Ok(ManifestArtifact { hash: hash.clone(), path })
    };
    let map = |m: &BTreeMap<String, ContentHash>| -> Result<BTreeMap<String, ManifestArtifact>, StoreError> {
        m.iter().map(|(k, h)| Ok((k.clone(), file_for(h)?))).collect()
    };

    let mut inputs = Vec::with_capacity(ctx.inputs.len());
    for b in &ctx.inputs {
        inputs.push(ManifestInput {
            parent_task: b.parent_task,
            artifacts: map(&b.artifacts)?,
            foreach_item: None,
        });
    }
    let auto = map(&ctx.auto)?;
    let parameters = map(&ctx.parameters)?;
    for (slot, b) in inputs.iter_mut().zip(&ctx.inputs) {
        if let Some(h) = &b.foreach_item {
            slot.foreach_item = Some(file_for(h)?);
        }
    }

    let manifest = InputManifest { inputs, auto, parameters };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text).map_err(StoreError::io(&manifest_path))?;
    Ok(Workspace { manifest: manifest_path, output_dir })
}

/// The full environment of a task process.
pub fn task_env(ctx: &TaskContext, ws: &Workspace) -> BTreeMap<String, String> {
    let mut env = ctx.env.clone();
    let p = &ctx.pathspec;
    env.insert(ENV_FLOW.into(), p.flow.clone());
    env.insert(ENV_RUN_ID.into(), p.run_id.to_string());
    env.insert(ENV_STEP.into(), ctx.step().to_string());
    env.insert(ENV_TASK_ID.into(), ctx.task_id().to_string());
    env.insert(ENV_ATTEMPT.into(), ctx.attempt.to_string());
    env.insert(ENV_INPUT_MANIFEST.into(), ws.manifest.display().to_string());
    env.insert(ENV_OUTPUT_DIR.into(), ws.output_dir.display().to_string());
    env
}

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Persists every staged output and returns name → hash.
pub fn collect_outputs(store: &Store, output_dir: &Path) -> Result<BTreeMap<String, ContentHash>, OutputError> {
    let violation = |m: String| OutputError::Violation(m);
    let mut staged: BTreeMap<String, PathBuf> = BTreeMap::new();
    let entries = fs::read_dir(output_dir).map_err(StoreError::io(output_dir))?;
    for entry in entries {
        let entry = entry.map_err(StoreError::io(output_dir))?;
        let path = entry.path();
        let file_name = entry.file_name();
        let Some(file_name) = file_name.to_str() else {
            return Err(violation(format!("non UTF-8 output name {}", path.display())));
        };
        if !entry.file_type().map_err(StoreError::io(&path))?.is_file() {
            return Err(violation(format!("output `{file_name}` is not a regular file")));
        }
        let Some((name, ext)) = file_name.rsplit_once('.') else {
            return Err(violation(format!("output `{file_name}` has no .json/.bin extension")));
        };
        if ext != "json" && ext != "bin" {
            return Err(violation(format!("output `{file_name}` has no .json/.bin extension")));
        }
        if !is_artifact_name(name) {
            return Err(violation(format!("invalid artifact name `{name}`")));
        }
        if staged.insert(name.to_string(), path).is_some() {
            return Err(violation(format!("artifact `{name}` staged as both .json and .bin")));
        }
    }
    let mut out = BTreeMap::new();
    for (name, path) in staged {
        let bytes = fs::read(&path).map_err(StoreError::io(&path))?;
        let value = if path.extension().is_some_and(|e| e == "json") {
            ArtifactValue::from_json_text(&bytes)
                .map_err(|e| violation(format!("artifact `{name}` is not valid JSON: {e}")))?
        } else {
            ArtifactValue::Bytes(bytes)
        };
        out.insert(name, store.put(&value)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ctx(store: &Store) -> TaskContext {
        let x = store.put(&ArtifactValue::Json(json!({"b": 1, "a": [1.5]}))).unwrap();
        let blob = store.put(&ArtifactValue::Bytes(b"\x00raw".to_vec())).unwrap();
        let item = store.put(&ArtifactValue::Json(json!(20))).unwrap();
        TaskContext {
            pathspec: Pathspec::task("F", 1, "body", 4),
            command: "true".into(),
            env: BTreeMap::from([("SEED".into(), "1".into())]),
            inputs: vec![InputBinding {
                parent_task: 2,
                artifacts: BTreeMap::from([("x".into(), x.clone()), ("blob".into(), blob.clone())]),
                foreach_item: Some(item),
            }],
            auto: BTreeMap::from([("x".into(), x)]),
            parameters: BTreeMap::new(),
            foreach_stack: vec![],
            resources: Resources::default(),
            attempt: 2,
            max_attempts: 3,
            code_package: ContentHash::of(b"pkg"),
            code_root: PathBuf::from("."),
        }
    }

    #[test]
    fn manifest_materializes_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("s")).unwrap();
        let c = ctx(&store);
        let ws = materialize(&store, &c, &dir.path().join("w")).unwrap();
        let m: serde_json::Value = serde_json::from_slice(&fs::read(&ws.manifest).unwrap()).unwrap();
        let x_path = m["inputs"][0]["artifacts"]["x"]["path"].as_str().unwrap();
        assert_eq!(fs::read_to_string(x_path).unwrap(), r#"{"a":[1.5],"b":1}"#);
        let blob_path = m["inputs"][0]["artifacts"]["blob"]["path"].as_str().unwrap();
        assert_eq!(fs::read(blob_path).unwrap(), b"\x00raw");
        let item_path = m["inputs"][0]["foreach_item"]["path"].as_str().unwrap();
        assert_eq!(fs::read_to_string(item_path).unwrap(), "20");
        assert_eq!(m["auto"]["x"]["path"].as_str().unwrap(), x_path);
        assert_eq!(m["parameters"], json!({}));
        assert_eq!(fs::read_dir(&ws.output_dir).unwrap().count(), 0);

        let env = task_env(&c, &ws);
        assert_eq!(env[ENV_TASK_ID], "4");
        assert_eq!(env[ENV_ATTEMPT], "2");
        assert_eq!(env[ENV_STEP], "body");
        assert_eq!(env["SEED"], "1");
    }

    #[test]
    fn outputs_become_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("s")).unwrap();
        let out = dir.path().join("out");
        fs::create_dir(&out).unwrap();
        fs::write(out.join("y.json"), "  42 \n").unwrap();
        fs::write(out.join("model.bin"), b"weights").unwrap();
        let got = collect_outputs(&store, &out).unwrap();
        assert_eq!(got["y"], store.put(&ArtifactValue::Json(json!(42))).unwrap());
        assert_eq!(got["model"], store.put(&ArtifactValue::Bytes(b"weights".to_vec())).unwrap());
    }

    #[test]
    fn malformed_staging_is_a_violation() {
        let cases: &[&[(&str, &[u8])]] = &[
            &[("y.json", b"1"), ("y.bin", b"1")],
            &[("y.txt", b"1")],
            &[("_secret.json", b"1")],
            &[("y.json", b"{not json")],
            &[("noext", b"1")],
        ];
        for files in cases {
            let dir = tempfile::tempdir().unwrap();
            let store = Store::open(dir.path().join("s")).unwrap();
            let out = dir.path().join("out");
            fs::create_dir(&out).unwrap();
            for (name, content) in *files {
                fs::write(out.join(name), content).unwrap();
            }
            assert!(matches!(collect_outputs(&store, &out), Err(OutputError::Violation(_))), "{files:?}");
        }
    }
}
