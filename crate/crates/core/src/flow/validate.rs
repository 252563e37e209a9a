//! Structural linting of a flow.
//!
//! Beyond the usual graph checks (acyclic, everything reachable from
//! `start`, `end` reachable from everything) flows must follow a nested
//! split/join discipline. A pass over the steps in topological order
//! carries a stack of open fan-outs along every edge:
//!
//! * a split pushes one frame per branch, a foreach pushes a single frame;
//! * a step with several incoming edges is a static join and must pop the
//!   frames of exactly one split, one edge per branch, with identical
//!   enclosing stacks;
//! * a step marked `join` pops a foreach frame and must have exactly one
//!   incoming edge;
//! * `end` must be reached with an empty stack.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::Serialize;

use super::{FlowSpec, Transition, END, START};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticCode {
    MissingStart,
    MissingEnd,
    EndHasTransition,
    MissingTransition,
    UnknownTarget,
    DuplicateTarget,
    Cycle,
    Unreachable,
    DeadEnd,
    UnmatchedSplit,
    MixedJoin,
    ForeachIntoNonJoin,
    EmptyForeachBody,
    StrayJoinMarker,
}

impl fmt::Display for DiagnosticCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("code serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    pub severity: Severity,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    fn from_diagnostics(diagnostics: Vec<Diagnostic>) -> Self {
        let ok = !diagnostics.iter().any(|d| d.severity == Severity::Error);
        ValidationReport { ok, diagnostics }
    }

    pub fn has(&self, code: DiagnosticCode) -> bool {
        self.diagnostics.iter().any(|d| d.code == code)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let codes: Vec<String> = self.diagnostics.iter().map(|d| d.code.to_string()).collect();
        write!(f, "{}", codes.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinKind {
    /// Merges the branches of `split`; `branches[i]` is the step whose edge
    /// carries branch `i` (the split step itself for an empty branch).
    Static { split: String, branches: Vec<String> },
    /// Merges all tasks spawned by `foreach_step`.
    Foreach { foreach_step: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FrameKind {
    Split,
    Foreach,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Frame {
    opener: String,
    kind: FrameKind,
    branch: usize,
}

/// Result of a successful validation: the facts the planner and the
/// runtime need about joins and nesting.
#[derive(Debug, Clone)]
pub struct FlowGraph {
    order: Vec<String>,
    parents: BTreeMap<String, Vec<String>>,
    joins: BTreeMap<String, JoinKind>,
    closing_join: BTreeMap<String, String>,
    foreach_depth: BTreeMap<String, usize>,
}

impl FlowGraph {
    /// Deterministic topological order, ties broken by declaration order.
    pub fn order(&self) -> &[String] {
        &self.order
    }

    /// Parent steps; for static joins in branch order.
    pub fn parents(&self, step: &str) -> &[String] {
        self.parents.get(step).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn join_kind(&self, step: &str) -> Option<&JoinKind> {
        self.joins.get(step)
    }

    pub fn is_join(&self, step: &str) -> bool {
        self.joins.contains_key(step)
    }

    /// The join closing a split or foreach step.
    pub fn join_of(&self, opener: &str) -> Option<&str> {
        self.closing_join.get(opener).map(String::as_str)
    }

    /// Number of enclosing foreach fan-outs a step runs under.
    pub fn foreach_depth(&self, step: &str) -> usize {
        self.foreach_depth.get(step).copied().unwrap_or(0)
    }

    /// All steps from which `step` is reachable, excluding `step`.
    pub fn ancestors(&self, step: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<&str> = self.parents(step).iter().map(String::as_str).collect();
        while let Some(s) = stack.pop() {
            if seen.insert(s.to_string()) {
                stack.extend(self.parents(s).iter().map(String::as_str));
            }
        }
        seen
    }
}

pub fn validate_dag(spec: &FlowSpec) -> ValidationReport {
    match analyze(spec) {
        Ok(_) => ValidationReport::from_diagnostics(Vec::new()),
        Err(report) => report,
    }
}

fn error(code: DiagnosticCode, step: Option<&str>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        code,
        severity: Severity::Error,
        step: step.map(str::to_string),
        message: message.into(),
    }
}

/// Validates `spec` and, when it is well formed, returns its join and
/// nesting structure.
pub fn analyze(spec: &FlowSpec) -> Result<FlowGraph, ValidationReport> {
    use DiagnosticCode::*;

    let mut diags = Vec::new();
    if spec.step(START).is_none() {
        diags.push(error(MissingStart, None, "flow has no `start` step"));
    }
    if spec.step(END).is_none() {
        diags.push(error(MissingEnd, None, "flow has no `end` step"));
    }
    for step in spec.steps.values() {
        let name = step.name.as_str();
        match (&step.transition, name == END) {
            (Some(_), true) => diags.push(error(EndHasTransition, Some(name), "`end` must not have a transition")),
            (None, false) => diags.push(error(MissingTransition, Some(name), "step has no transition")),
            _ => {}
        }
        if let Some(t) = &step.transition {
            let targets = t.targets();
            let mut seen = BTreeSet::new();
            for target in &targets {
                if spec.step(target).is_none() {
                    diags.push(error(UnknownTarget, Some(name), format!("unknown target `{target}`")));
                }
                if !seen.insert(*target) {
                    diags.push(error(DuplicateTarget, Some(name), format!("target `{target}` listed twice")));
                }
            }
        }
    }
    if !diags.is_empty() {
        return Err(ValidationReport::from_diagnostics(diags));
    }

    let names: Vec<&str> = spec.steps.keys().map(String::as_str).collect();
    let index = |s: &str| spec.declaration_index(s).expect("target checked above");
    let successors: Vec<Vec<usize>> = spec
        .steps
        .values()
        .map(|s| s.transition.as_ref().map(|t| t.targets().into_iter().map(index).collect()).unwrap_or_default())
        .collect();
    let n = names.len();

    // Cycles: iterative three-colour DFS, one diagnostic per back-edge target.
    let mut colour = vec![0u8; n];
    let mut cyclic = BTreeSet::new();
    for root in 0..n {
        if colour[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        colour[root] = 1;
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(&succ) = successors[node].get(*next) {
                *next += 1;
                match colour[succ] {
                    0 => {
                        colour[succ] = 1;
                        stack.push((succ, 0));
                    }
                    1 => {
                        cyclic.insert(succ);
                    }
                    _ => {}
                }
            } else {
                colour[node] = 2;
                stack.pop();
            }
        }
    }
    for &c in &cyclic {
        diags.push(error(Cycle, Some(names[c]), format!("step `{}` lies on a cycle", names[c])));
    }

    let start = index(START);
    let end = index(END);
    let forward = reach(start, &successors);
    let mut predecessors = vec![Vec::new(); n];
    for (from, succs) in successors.iter().enumerate() {
        for &to in succs {
            predecessors[to].push(from);
        }
    }
    let backward = reach(end, &predecessors);
    for i in 0..n {
        if !forward[i] {
            diags.push(error(Unreachable, Some(names[i]), "step is not reachable from `start`"));
        } else if !backward[i] {
            diags.push(error(DeadEnd, Some(names[i]), "`end` is not reachable from this step"));
        }
    }
    if !diags.is_empty() {
        return Err(ValidationReport::from_diagnostics(diags));
    }

    let order = topological_order(&successors);
    structure(spec, &names, &order).map_err(|d| ValidationReport::from_diagnostics(vec![d]))
}

fn reach(from: usize, edges: &[Vec<usize>]) -> Vec<bool> {
    let mut seen = vec![false; edges.len()];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(node) = stack.pop() {
        for &next in &edges[node] {
            if !seen[next] {
                seen[next] = true;
                stack.push(next);
            }
        }
    }
    seen
}

/// Kahn's algorithm, always taking the ready step declared first.
/// Assumes an acyclic graph.
pub(super) fn topological_order(successors: &[Vec<usize>]) -> Vec<usize> {
    let mut indegree = vec![0usize; successors.len()];
    for succs in successors {
        for &s in succs {
            indegree[s] += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..successors.len()).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(successors.len());
    while let Some(Reverse(node)) = ready.pop() {
        order.push(node);
        for &s in &successors[node] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    order
}

fn structure(spec: &FlowSpec, names: &[&str], order: &[usize]) -> Result<FlowGraph, Diagnostic> {
    use DiagnosticCode::*;

    // Incoming edges per step: (source step, stack carried along the edge).
    let mut incoming: BTreeMap<&str, Vec<(&str, Vec<Frame>)>> = BTreeMap::new();
    let mut graph = FlowGraph {
        order: order.iter().map(|&i| names[i].to_string()).collect(),
        parents: BTreeMap::new(),
        joins: BTreeMap::new(),
        closing_join: BTreeMap::new(),
        foreach_depth: BTreeMap::new(),
    };

    for &i in order {
        let name = names[i];
        let step = &spec.steps[i];
        let inc = incoming.remove(name).unwrap_or_default();
        let here = Some(name);

        let stack: Vec<Frame> = if step.join {
            if inc.len() >= 2 {
                return Err(error(MixedJoin, here, "foreach join also receives edges from other steps"));
            }
            let Some((from, carried)) = inc.into_iter().next() else {
                return Err(error(StrayJoinMarker, here, "join marker on a step without parents"));
            };
            let mut stack = carried;
            match stack.pop() {
                Some(Frame { opener, kind: FrameKind::Foreach, .. }) => {
                    if opener == from {
                        return Err(error(EmptyForeachBody, here, format!("foreach `{opener}` targets its join directly")));
                    }
                    graph.joins.insert(name.to_string(), JoinKind::Foreach { foreach_step: opener.clone() });
                    graph.closing_join.insert(opener, name.to_string());
                    graph.parents.insert(name.to_string(), vec![from.to_string()]);
                }
                Some(frame) => {
                    return Err(error(StrayJoinMarker, here, format!("join marker inside split `{}`; static joins are implied by their in-degree", frame.opener)));
                }
                None => return Err(error(StrayJoinMarker, here, "join marker outside any foreach")),
            }
            stack
        } else if inc.len() >= 2 {
            if let Some((_, s)) = inc.iter().find(|(_, s)| matches!(s.last(), Some(f) if f.kind == FrameKind::Foreach)) {
                let opener = &s.last().expect("checked").opener;
                return Err(error(ForeachIntoNonJoin, here, format!("body of foreach `{opener}` flows into a static join")));
            }
            let Some(Frame { opener, .. }) = inc[0].1.last().cloned() else {
                return Err(error(UnmatchedSplit, here, "step has several parents but no split is open"));
            };
            let prefix = &inc[0].1[..inc[0].1.len() - 1];
            let Some(Transition::Split(targets)) = spec.step(&opener).and_then(|s| s.transition.as_ref()) else {
                unreachable!("split frames are opened by split steps");
            };
            let mut branches: Vec<Option<&str>> = vec![None; targets.len()];
            for (from, s) in &inc {
                let top = s.last();
                let same_split = matches!(top, Some(f) if f.opener == opener) && &s[..s.len() - 1] == prefix;
                if !same_split {
                    return Err(error(UnmatchedSplit, here, "join receives edges from different splits or nesting levels"));
                }
                let slot = &mut branches[top.expect("checked").branch];
                if slot.replace(from).is_some() {
                    return Err(error(UnmatchedSplit, here, format!("two edges of the same branch of `{opener}` meet here")));
                }
            }
            if inc.len() != targets.len() {
                return Err(error(UnmatchedSplit, here, format!("split `{opener}` has {} branches but {} reach this join", targets.len(), inc.len())));
            }
            let branches: Vec<String> = branches.into_iter().map(|b| b.expect("all slots filled").to_string()).collect();
            graph.parents.insert(name.to_string(), branches.clone());
            graph.joins.insert(name.to_string(), JoinKind::Static { split: opener.clone(), branches });
            graph.closing_join.insert(opener, name.to_string());
            prefix.to_vec()
        } else {
            match inc.into_iter().next() {
                Some((from, s)) => {
                    graph.parents.insert(name.to_string(), vec![from.to_string()]);
                    s
                }
                None => Vec::new(),
            }
        };

        if name == END {
            if let Some(top) = stack.last() {
                let code = match top.kind {
                    FrameKind::Foreach => ForeachIntoNonJoin,
                    FrameKind::Split => UnmatchedSplit,
                };
                return Err(error(code, here, format!("`end` reached while `{}` is still open", top.opener)));
            }
        }

        graph.foreach_depth.insert(
            name.to_string(),
            stack.iter().filter(|f| f.kind == FrameKind::Foreach).count(),
        );

        match step.transition.as_ref() {
            Some(Transition::Linear(t)) => incoming.entry(t).or_default().push((name, stack)),
            Some(Transition::Split(ts)) => {
                for (branch, t) in ts.iter().enumerate() {
                    let mut s = stack.clone();
                    s.push(Frame { opener: name.to_string(), kind: FrameKind::Split, branch });
                    incoming.entry(t).or_default().push((name, s));
                }
            }
            Some(Transition::Foreach { target, .. }) => {
                let mut s = stack;
                s.push(Frame { opener: name.to_string(), kind: FrameKind::Foreach, branch: 0 });
                incoming.entry(target).or_default().push((name, s));
            }
            None => {}
        }
    }
    Ok(graph)
}
