use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    is_env_var_name, is_flow_name, is_step_name, DecoratorSet, FlowSpec, ParameterSpec,
    Resources, StepSpec, Transition,
};
use crate::cas::ArtifactValue;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("syntax error in flow document: {0}")]
    Syntax(String),
    #[error("schema error in flow document: {0}")]
    Schema(String),
    #[error("duplicate step `{0}`")]
    DuplicateStep(String),
    #[error("flow failed validation: {0}")]
    Invalid(super::ValidationReport),
}

// On-the-wire document. Kept separate from the model so the model can
// carry typed transitions while the document stays flat.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowDocument {
    name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    parameters: Vec<ParameterDocument>,
    steps: Vec<StepDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterDocument {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default: Option<Value>,
    #[serde(default, skip_serializing_if = "is_false")]
    required: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDocument {
    name: String,
    command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next: Option<NextDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resources: Option<ResourcesDocument>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    environment: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    retry: Option<RetryDocument>,
    #[serde(default, skip_serializing_if = "is_false")]
    remote: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    card: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    join: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NextDocument {
    #[serde(rename = "type")]
    kind: NextKind,
    targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    foreach_key: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum NextKind {
    Linear,
    Split,
    Foreach,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResourcesDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cpu: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    memory_mb: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gpu: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetryDocument {
    max_attempts: u32,
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn schema(msg: impl Into<String>) -> FlowError {
    FlowError::Schema(msg.into())
}

/// Parses a UTF-8 JSON flow document. Structural problems (unknown
/// targets, cycles, missing `start`) are left to [`super::validate_dag`];
/// this only rejects documents that cannot be typed.
pub fn parse_flow(document: &[u8]) -> Result<FlowSpec, FlowError> {
    let text = std::str::from_utf8(document)
        .map_err(|e| FlowError::Syntax(format!("document is not UTF-8: {e}")))?;
    let doc: FlowDocument = serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => FlowError::Schema(e.to_string()),
        _ => FlowError::Syntax(e.to_string()),
    })?;

    if !is_flow_name(&doc.name) {
        return Err(schema(format!("invalid flow name `{}`", doc.name)));
    }

    let mut parameters = Vec::with_capacity(doc.parameters.len());
    for p in doc.parameters {
        if !is_step_name(&p.name) {
            return Err(schema(format!("invalid parameter name `{}`", p.name)));
        }
        if parameters.iter().any(|q: &ParameterSpec| q.name == p.name) {
            return Err(schema(format!("duplicate parameter `{}`", p.name)));
        }
        if p.required && p.default.is_some() {
            return Err(schema(format!("required parameter `{}` has a default", p.name)));
        }
        parameters.push(ParameterSpec {
            name: p.name,
            default: p.default.map(ArtifactValue::Json),
            required: p.required,
        });
    }

    let mut steps = IndexMap::with_capacity(doc.steps.len());
    for s in doc.steps {
        let step = convert_step(s)?;
        if steps.contains_key(&step.name) {
            return Err(FlowError::DuplicateStep(step.name));
        }
        steps.insert(step.name.clone(), step);
    }

    Ok(FlowSpec { name: doc.name, parameters, steps })
}

fn convert_step(s: StepDocument) -> Result<StepSpec, FlowError> {
    if !is_step_name(&s.name) {
        return Err(schema(format!("invalid step name `{}`", s.name)));
    }
    if s.command.trim().is_empty() {
        return Err(schema(format!("step `{}` has an empty command", s.name)));
    }
    let transition = s.next.map(|n| convert_next(&s.name, n)).transpose()?;

    let mut decorators = DecoratorSet::default();
    if let Some(r) = s.resources {
        let defaults = Resources::default();
        decorators.resources = Resources {
            cpu: r.cpu.unwrap_or(defaults.cpu),
            memory_mb: r.memory_mb.unwrap_or(defaults.memory_mb),
            gpu: r.gpu.unwrap_or(defaults.gpu),
        };
        if decorators.resources.cpu < 1 {
            return Err(schema(format!("step `{}`: resources.cpu must be >= 1", s.name)));
        }
        if decorators.resources.memory_mb < 1 {
            return Err(schema(format!("step `{}`: resources.memory_mb must be >= 1", s.name)));
        }
    }
    for key in s.environment.keys() {
        if !is_env_var_name(key) {
            return Err(schema(format!("step `{}`: invalid environment variable `{key}`", s.name)));
        }
    }
    decorators.environment = s.environment;
    if let Some(retry) = s.retry {
        if retry.max_attempts < 1 {
            return Err(schema(format!("step `{}`: retry.max_attempts must be >= 1", s.name)));
        }
        decorators.max_attempts = retry.max_attempts;
    }
    decorators.remote = s.remote;
    decorators.card = s.card;

    Ok(StepSpec { name: s.name, command: s.command, transition, join: s.join, decorators })
}

fn convert_next(step: &str, n: NextDocument) -> Result<Transition, FlowError> {
    for t in &n.targets {
        if !is_step_name(t) {
            return Err(schema(format!("step `{step}`: invalid target name `{t}`")));
        }
    }
    if n.kind != NextKind::Foreach && n.foreach_key.is_some() {
        return Err(schema(format!("step `{step}`: foreach_key is only valid on foreach")));
    }
    match n.kind {
        NextKind::Linear => match <[String; 1]>::try_from(n.targets) {
            Ok([t]) => Ok(Transition::Linear(t)),
            Err(_) => Err(schema(format!("step `{step}`: linear takes exactly one target"))),
        },
        NextKind::Split => {
            if n.targets.len() < 2 {
                return Err(schema(format!("step `{step}`: split needs at least two targets")));
            }
            Ok(Transition::Split(n.targets))
        }
        NextKind::Foreach => {
            let key = n.foreach_key.ok_or_else(|| {
                schema(format!("step `{step}`: foreach requires foreach_key"))
            })?;
            if !super::is_artifact_name(&key) {
                return Err(schema(format!("step `{step}`: invalid foreach_key `{key}`")));
            }
            match <[String; 1]>::try_from(n.targets) {
                Ok([target]) => Ok(Transition::Foreach { target, foreach_key: key }),
                Err(_) => Err(schema(format!("step `{step}`: foreach takes exactly one target"))),
            }
        }
    }
}

impl FlowSpec {
    /// Serializes back to the flow document format.
    pub fn to_document(&self) -> Value {
        let doc = FlowDocument {
            name: self.name.clone(),
            parameters: self
                .parameters
                .iter()
                .map(|p| ParameterDocument {
                    name: p.name.clone(),
                    default: p.default.as_ref().and_then(|d| d.as_json().cloned()),
                    required: p.required,
                })
                .collect(),
            steps: self.steps.values().map(step_document).collect(),
        };
        serde_json::to_value(doc).expect("flow document serializes")
    }
}

fn step_document(s: &StepSpec) -> StepDocument {
    let d = &s.decorators;
    let next = s.transition.as_ref().map(|t| match t {
        Transition::Linear(target) => NextDocument {
            kind: NextKind::Linear,
            targets: vec![target.clone()],
            foreach_key: None,
        },
        Transition::Split(targets) => NextDocument {
            kind: NextKind::Split,
            targets: targets.clone(),
            foreach_key: None,
        },
        Transition::Foreach { target, foreach_key } => NextDocument {
            kind: NextKind::Foreach,
            targets: vec![target.clone()],
            foreach_key: Some(foreach_key.clone()),
        },
    });
    let resources = (d.resources != Resources::default()).then_some(ResourcesDocument {
        cpu: Some(d.resources.cpu),
        memory_mb: Some(d.resources.memory_mb),
        gpu: Some(d.resources.gpu),
    });
    StepDocument {
        name: s.name.clone(),
        command: s.command.clone(),
        next,
        resources,
        environment: d.environment.clone(),
        retry: (d.max_attempts != 1).then_some(RetryDocument { max_attempts: d.max_attempts }),
        remote: d.remote,
        card: d.card,
        join: s.join,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn doc(v: Value) -> Vec<u8> {
        serde_json::to_vec(&v).unwrap()
    }

    fn minimal() -> Value {
        json!({
            "name": "Minimal",
            "steps": [
                {"name": "start", "command": "true", "next": {"type": "linear", "targets": ["end"]}},
                {"name": "end", "command": "true"}
            ]
        })
    }

    #[test]
    fn minimal_flow_has_two_steps() {
        let spec = parse_flow(&doc(minimal())).unwrap();
        assert_eq!(spec.steps.len(), 2);
        assert_eq!(spec.steps.get_index(0).unwrap().0, "start");
        assert_eq!(
            spec.step("start").unwrap().transition,
            Some(Transition::Linear("end".into()))
        );
    }

    #[test]
    fn duplicate_step_is_rejected() {
        let d = json!({
            "name": "Dup",
            "steps": [
                {"name": "start", "command": "true", "next": {"type": "linear", "targets": ["train"]}},
                {"name": "train", "command": "true", "next": {"type": "linear", "targets": ["end"]}},
                {"name": "train", "command": "true", "next": {"type": "linear", "targets": ["end"]}},
                {"name": "end", "command": "true"}
            ]
        });
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::DuplicateStep(s)) if s == "train"));
    }

    #[test]
    fn zero_cpu_is_schema_error() {
        let mut d = minimal();
        d["steps"][0]["resources"] = json!({"cpu": 0});
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut d = minimal();
        d["steps"][0]["timeout"] = json!(5);
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
        let mut d = minimal();
        d["owner"] = json!("x");
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
    }

    #[test]
    fn malformed_json_is_syntax_error() {
        assert!(matches!(parse_flow(b"{\"name\": "), Err(FlowError::Syntax(_))));
        assert!(matches!(parse_flow(b"\xff\xfe"), Err(FlowError::Syntax(_))));
    }

    #[test]
    fn field_level_rules() {
        let bad = [
            ("command", json!("  ")),
            ("name", json!("Start")),
        ];
        for (key, value) in bad {
            let mut d = minimal();
            d["steps"][0][key] = value;
            assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))), "{key}");
        }
        let mut d = minimal();
        d["steps"][0]["environment"] = json!({"lower": "x"});
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
        let mut d = minimal();
        d["steps"][0]["next"] = json!({"type": "split", "targets": ["end"]});
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
        let mut d = minimal();
        d["steps"][0]["next"] = json!({"type": "foreach", "targets": ["end"]});
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
        let mut d = minimal();
        d["steps"][0]["retry"] = json!({"max_attempts": 0});
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
        let mut d = minimal();
        d["parameters"] = json!([{"name": "lr", "default": 0.1, "required": true}]);
        assert!(matches!(parse_flow(&doc(d)), Err(FlowError::Schema(_))));
    }

    #[test]
    fn decorators_are_parsed() {
        let mut d = minimal();
        d["steps"][0]["resources"] = json!({"cpu": 2, "gpu": 1});
        d["steps"][0]["environment"] = json!({"SEED": "7"});
        d["steps"][0]["retry"] = json!({"max_attempts": 3});
        d["steps"][0]["remote"] = json!(true);
        d["steps"][1]["card"] = json!(true);
        let spec = parse_flow(&doc(d)).unwrap();
        let start = &spec.step("start").unwrap().decorators;
        assert_eq!(start.resources, Resources { cpu: 2, memory_mb: 512, gpu: 1 });
        assert_eq!(start.environment["SEED"], "7");
        assert_eq!(start.max_attempts, 3);
        assert!(start.remote);
        assert!(spec.step("end").unwrap().decorators.card);
    }

    #[test]
    fn document_round_trip() {
        let mut d = minimal();
        d["parameters"] = json!([{"name": "items", "default": [1, 2]}, {"name": "seed", "required": true}]);
        d["steps"][0]["retry"] = json!({"max_attempts": 2});
        let spec = parse_flow(&doc(d)).unwrap();
        let again = parse_flow(&serde_json::to_vec(&spec.to_document()).unwrap()).unwrap();
        assert_eq!(spec, again);
    }
}
