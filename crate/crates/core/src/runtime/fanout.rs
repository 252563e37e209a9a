use std::collections::BTreeMap;

use super::RuntimeError;
use crate::cas::{ArtifactValue, ContentHash, Store};
use crate::flow::{FlowGraph, JoinKind};
use crate::metadata::{ForeachFrame, Status, TaskRecord};
use crate::protocol::InputBinding;

/// A task that is ready to be registered: its position in the run and its
/// inputs are known, its id is not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingTask {
    pub step: String,
    pub foreach_stack: Vec<ForeachFrame>,
    pub parents: Vec<u64>,
    pub inputs: Vec<InputBinding>,
    pub auto: BTreeMap<String, ContentHash>,
}

impl PendingTask {
    /// The single child of `parent` on a linear or split edge.
    pub fn child_of(step: &str, parent: &TaskRecord) -> PendingTask {
        let artifacts = parent.public_artifacts();
        PendingTask {
            step: step.to_string(),
            foreach_stack: parent.foreach_stack.clone(),
            parents: vec![parent.task_id],
            inputs: vec![InputBinding { parent_task: parent.task_id, artifacts: artifacts.clone(), foreach_item: None }],
            auto: artifacts,
        }
    }
}

/// One child per element of the list bound to `foreach_key` in `parent`.
pub fn expand_foreach(
    store: &Store,
    parent: &TaskRecord,
    target: &str,
    foreach_key: &str,
) -> Result<Vec<PendingTask>, RuntimeError> {
    let hash = parent.artifacts.get(foreach_key).ok_or_else(|| RuntimeError::MissingForeachKey {
        task: parent.pathspec(),
        key: foreach_key.to_string(),
    })?;
    let items = match store.get(hash)? {
        ArtifactValue::Json(serde_json::Value::Array(items)) => items,
        _ => return Err(RuntimeError::NotAList { task: parent.pathspec(), key: foreach_key.to_string() }),
    };
    let n = items.len() as u64;
    let artifacts = parent.public_artifacts();
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.into_iter().enumerate() {
        let item_hash = store.put(&ArtifactValue::Json(item))?;
        let mut stack = parent.foreach_stack.clone();
        stack.push(ForeachFrame { step: parent.step.clone(), index: i as u64, cardinality: n });
        out.push(PendingTask {
            step: target.to_string(),
            foreach_stack: stack,
            parents: vec![parent.task_id],
            inputs: vec![InputBinding {
                parent_task: parent.task_id,
                artifacts: artifacts.clone(),
                foreach_item: Some(item_hash),
            }],
            auto: artifacts.clone(),
        });
    }
    Ok(out)
}

/// Orders the parents of a join and computes the artifacts that pass
/// through it unchanged (same name and hash in every parent).
pub fn collect_join_inputs(
    graph: &FlowGraph,
    join_step: &str,
    parents: &[TaskRecord],
) -> Result<(Vec<InputBinding>, BTreeMap<String, ContentHash>), RuntimeError> {
    if let Some(p) = parents.iter().find(|p| p.status != Status::Succeeded) {
        return Err(RuntimeError::ParentNotSucceeded(p.pathspec()));
    }
    let mut ordered: Vec<&TaskRecord> = parents.iter().collect();
    match graph.join_kind(join_step) {
        Some(JoinKind::Static { branches, .. }) => {
            let mut slots: Vec<Option<&TaskRecord>> = vec![None; branches.len()];
            for p in parents {
                let Some(i) = branches.iter().position(|b| *b == p.step) else {
                    return Err(RuntimeError::IncompleteFanIn { join: join_step.to_string(), detail: format!("`{}` is not a branch", p.step) });
                };
                if slots[i].replace(p).is_some() {
                    return Err(RuntimeError::IncompleteFanIn { join: join_step.to_string(), detail: format!("branch `{}` arrived twice", p.step) });
                }
            }
            if let Some(i) = slots.iter().position(Option::is_none) {
                return Err(RuntimeError::IncompleteFanIn { join: join_step.to_string(), detail: format!("branch `{}` missing", branches[i]) });
            }
            ordered = slots.into_iter().flatten().collect();
        }
        Some(JoinKind::Foreach { foreach_step }) => {
            let frame = |p: &TaskRecord| p.foreach_stack.last().cloned();
            let mut n = None;
            for p in parents {
                let f = frame(p).filter(|f| f.step == *foreach_step).ok_or_else(|| RuntimeError::CardinalityMismatch {
                    join: join_step.to_string(),
                    detail: format!("task {} is not a child of `{foreach_step}`", p.task_id),
                })?;
                let prefix = &p.foreach_stack[..p.foreach_stack.len() - 1];
                if n.is_some_and(|(c, pre): (u64, &[_])| c != f.cardinality || pre != prefix) {
                    return Err(RuntimeError::CardinalityMismatch {
                        join: join_step.to_string(),
                        detail: "parents disagree on their foreach frame".to_string(),
                    });
                }
                n = Some((f.cardinality, prefix));
            }
            ordered.sort_by_key(|p| p.foreach_stack.last().map(|f| f.index));
            if let Some((n, _)) = n {
                let seen: Vec<u64> = ordered.iter().filter_map(|p| p.foreach_stack.last().map(|f| f.index)).collect();
                if seen != (0..n).collect::<Vec<_>>() {
                    return Err(RuntimeError::IncompleteFanIn {
                        join: join_step.to_string(),
                        detail: format!("have indices {seen:?} of {n}"),
                    });
                }
            }
        }
        None => {
            if parents.len() != 1 {
                return Err(RuntimeError::IncompleteFanIn { join: join_step.to_string(), detail: "not a join".to_string() });
            }
        }
    }

    let inputs: Vec<InputBinding> = ordered
        .iter()
        .map(|p| InputBinding { parent_task: p.task_id, artifacts: p.public_artifacts(), foreach_item: None })
        .collect();
    let mut auto = inputs.first().map(|b| b.artifacts.clone()).unwrap_or_default();
    for b in inputs.iter().skip(1) {
        auto.retain(|name, hash| b.artifacts.get(name) == Some(hash));
    }
    Ok((inputs, auto))
}
