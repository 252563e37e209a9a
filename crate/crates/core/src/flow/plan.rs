use serde::{Deserialize, Serialize};

use super::{analyze, FlowError, FlowSpec, JoinKind, Resources, Transition};

/// Static, topologically ordered description of a flow, suitable for
/// handing to an external scheduler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchestrationPlan {
    pub flow: String,
    pub order: Vec<String>,
    pub nodes: Vec<PlanNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanNode {
    pub step: String,
    /// Any of `static`, `split-branch`, `dynamic-fan-out`, `join`.
    pub annotations: Vec<String>,
    pub command: String,
    pub parents: Vec<String>,
    pub next: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub foreach_key: Option<String>,
    /// For joins: the split or foreach step being merged.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joins: Option<String>,
    pub foreach_depth: usize,
    pub resources: Resources,
    pub remote: bool,
}

pub fn topological_plan(spec: &FlowSpec) -> Result<OrchestrationPlan, FlowError> {
    let graph = analyze(spec).map_err(FlowError::Invalid)?;
    let nodes = graph
        .order()
        .iter()
        .map(|name| {
            let step = &spec.steps[name];
            let mut annotations = Vec::new();
            let joins = graph.join_kind(name).map(|k| match k {
                JoinKind::Static { split, .. } => split.clone(),
                JoinKind::Foreach { foreach_step } => foreach_step.clone(),
            });
            if joins.is_some() {
                annotations.push("join".to_string());
            }
            let mut foreach_key = None;
            match &step.transition {
                Some(Transition::Split(_)) => annotations.push("split-branch".to_string()),
                Some(Transition::Foreach { foreach_key: key, .. }) => {
                    annotations.push("dynamic-fan-out".to_string());
                    foreach_key = Some(key.clone());
                }
                _ => {}
            }
            if annotations.is_empty() {
                annotations.push("static".to_string());
            }
            PlanNode {
                step: name.clone(),
                annotations,
                command: step.command.clone(),
                parents: graph.parents(name).to_vec(),
                next: step
                    .transition
                    .as_ref()
                    .map(|t| t.targets().into_iter().map(str::to_string).collect())
                    .unwrap_or_default(),
                foreach_key,
                joins,
                foreach_depth: graph.foreach_depth(name),
                resources: step.decorators.resources,
                remote: step.decorators.remote,
            }
        })
        .collect();
    Ok(OrchestrationPlan { flow: spec.name.clone(), order: graph.order().to_vec(), nodes })
}

impl OrchestrationPlan {
    /// Pretty-printed plan document with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }
}
