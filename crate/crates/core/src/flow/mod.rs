//! Flow documents: the declared DAG of steps, its parser, the structural
//! validator and the static orchestration plan.

mod parse;
mod plan;
mod validate;

use std::collections::BTreeMap;

use indexmap::IndexMap;

use crate::cas::ArtifactValue;

pub use parse::{parse_flow, FlowError};
pub use plan::{topological_plan, OrchestrationPlan, PlanNode};
pub use validate::{
    analyze, validate_dag, Diagnostic, DiagnosticCode, FlowGraph, JoinKind, Severity,
    ValidationReport,
};

pub const START: &str = "start";
pub const END: &str = "end";

/// Maximum length of step, flow and parameter names.
pub const MAX_NAME_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub name: String,
    pub parameters: Vec<ParameterSpec>,
    /// Steps in declaration order.
    pub steps: IndexMap<String, StepSpec>,
}

impl FlowSpec {
    pub fn step(&self, name: &str) -> Option<&StepSpec> {
        self.steps.get(name)
    }

    /// Position of a step in declaration order.
    pub fn declaration_index(&self, name: &str) -> Option<usize> {
        self.steps.get_index_of(name)
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSpec {
    pub name: String,
    pub command: String,
    /// `None` only for `end` in a well-formed flow.
    pub transition: Option<Transition>,
    /// Marks the step that merges the tasks of a foreach fan-out.
    pub join: bool,
    pub decorators: DecoratorSet,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transition {
    Linear(String),
    Split(Vec<String>),
    Foreach { target: String, foreach_key: String },
}

impl Transition {
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Transition::Linear(t) => vec![t.as_str()],
            Transition::Split(ts) => ts.iter().map(String::as_str).collect(),
            Transition::Foreach { target, .. } => vec![target.as_str()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Resources {
    pub cpu: u32,
    pub memory_mb: u64,
    pub gpu: u32,
}

impl Default for Resources {
    fn default() -> Self {
        Resources { cpu: 1, memory_mb: 512, gpu: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoratorSet {
    pub resources: Resources,
    pub environment: BTreeMap<String, String>,
    pub max_attempts: u32,
    pub remote: bool,
    pub card: bool,
}

impl Default for DecoratorSet {
    fn default() -> Self {
        DecoratorSet {
            resources: Resources::default(),
            environment: BTreeMap::new(),
            max_attempts: 1,
            remote: false,
            card: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpec {
    pub name: String,
    pub default: Option<ArtifactValue>,
    pub required: bool,
}

/// `[a-z][a-z0-9_]*`, at most 64 bytes.
pub fn is_step_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
        && s.len() <= MAX_NAME_LEN
}

/// Flow names may also use upper case: `[A-Za-z][A-Za-z0-9_]*`.
pub fn is_flow_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && s.len() <= MAX_NAME_LEN
}

/// `[A-Z_][A-Z0-9_]*`
pub fn is_env_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('A'..='Z' | '_'))
        && chars.all(|c| matches!(c, 'A'..='Z' | '0'..='9' | '_'))
}

/// User-visible artifact names: `[A-Za-z][A-Za-z0-9_]*`. Names starting
/// with `_` are reserved for the engine (`_stdout`, `_stderr`, `_card`).
pub fn is_artifact_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        && s.len() <= MAX_NAME_LEN
}
