//! Independent oracles for flow structure, shared by the core tests and
//! the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use flowmill_core::flow::{parse_flow, FlowSpec, Transition};
use serde_json::{json, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Next {
    Linear(usize),
    Split(Vec<usize>),
    Foreach(usize),
    Terminal,
}

/// A flow as plain node indices. Node 0 is `start`, node 1 is `end`; the
/// order of `decl` is the declaration order.
#[derive(Debug, Clone)]
pub struct Shape {
    pub next: Vec<Next>,
    pub marked: Vec<bool>,
    pub decl: Vec<usize>,
}

pub fn name(i: usize) -> String {
    match i {
        0 => "start".into(),
        1 => "end".into(),
        _ => format!("s{i}"),
    }
}

impl Shape {
    pub fn targets(&self, i: usize) -> Vec<usize> {
        match &self.next[i] {
            Next::Linear(t) | Next::Foreach(t) => vec![*t],
            Next::Split(ts) => ts.clone(),
            Next::Terminal => vec![],
        }
    }

    pub fn document(&self) -> Value {
        let steps: Vec<Value> = self
            .decl
            .iter()
            .map(|&i| {
                let mut s = json!({"name": name(i), "command": "true"});
                let names = |ts: &[usize]| ts.iter().map(|&t| name(t)).collect::<Vec<_>>();
                match &self.next[i] {
                    Next::Linear(t) => s["next"] = json!({"type": "linear", "targets": [name(*t)]}),
                    Next::Split(ts) => s["next"] = json!({"type": "split", "targets": names(ts)}),
                    Next::Foreach(t) => {
                        s["next"] = json!({"type": "foreach", "targets": [name(*t)], "foreach_key": "items"})
                    }
                    Next::Terminal => {}
                }
                if self.marked[i] {
                    s["join"] = json!(true);
                }
                s
            })
            .collect();
        json!({"name": "Oracle", "steps": steps})
    }

    pub fn spec(&self) -> FlowSpec {
        parse_flow(self.document().to_string().as_bytes()).unwrap()
    }

    /// The shape of a parsed flow, or `None` when it lacks `start` or
    /// `end` or names an unknown step (such flows are never well formed).
    pub fn from_spec(spec: &FlowSpec) -> Option<Shape> {
        let mut index = std::collections::BTreeMap::new();
        index.insert("start", 0usize);
        index.insert("end", 1usize);
        if spec.step("start").is_none() || spec.step("end").is_none() {
            return None;
        }
        for name in spec.steps.keys() {
            let next = index.len();
            index.entry(name.as_str()).or_insert(next);
        }
        let n = index.len();
        let mut next = vec![Next::Terminal; n];
        let mut marked = vec![false; n];
        let mut decl = Vec::new();
        for (name, step) in &spec.steps {
            let i = index[name.as_str()];
            decl.push(i);
            marked[i] = step.join;
            let at = |t: &String| index.get(t.as_str()).copied();
            next[i] = match &step.transition {
                None => Next::Terminal,
                Some(Transition::Linear(t)) => Next::Linear(at(t)?),
                Some(Transition::Foreach { target, .. }) => Next::Foreach(at(target)?),
                Some(Transition::Split(ts)) => Next::Split(ts.iter().map(at).collect::<Option<_>>()?),
            };
        }
        Some(Shape { next, marked, decl })
    }
}

/// Accepts exactly the well-nested flows by rewriting the graph until
/// nothing applies. Rules:
///  * a linear node absorbs its successor when that successor has a single
///    incoming edge and no join marker;
///  * a split whose every branch is either a direct edge or one linear node
///    into a common unmarked step J, with J's in-degree equal to the branch
///    count, becomes a linear edge into J;
///  * a foreach into one linear node into a marked step J of in-degree one
///    becomes a linear edge into J and J loses its marker.
///
/// The flow is well formed iff only a terminal, unmarked `start` remains.
pub fn oracle_accepts(shape: &Shape) -> bool {
    let n = shape.next.len();
    let mut next = shape.next.clone();
    let mut marked = shape.marked.clone();
    let mut alive = vec![true; n];
    if next.iter().enumerate().any(|(i, t)| (i == 1) != (*t == Next::Terminal)) {
        return false;
    }
    let indegree = |next: &[Next], alive: &[bool], v: usize| -> usize {
        (0..n)
            .filter(|&u| alive[u])
            .map(|u| match &next[u] {
                Next::Linear(t) | Next::Foreach(t) => usize::from(*t == v),
                Next::Split(ts) => ts.iter().filter(|&&t| t == v).count(),
                Next::Terminal => 0,
            })
            .sum()
    };
    let distinct = |ts: &Vec<usize>| ts.iter().collect::<BTreeSet<_>>().len() == ts.len();
    if next.iter().any(|t| matches!(t, Next::Split(ts) if !distinct(ts))) {
        return false;
    }
    loop {
        let mut changed = false;
        for u in 0..n {
            if !alive[u] {
                continue;
            }
            match next[u].clone() {
                Next::Linear(v) => {
                    if v != u && v != 0 && !marked[v] && indegree(&next, &alive, v) == 1 {
                        next[u] = next[v].clone();
                        alive[v] = false;
                        changed = true;
                    }
                }
                Next::Split(ts) => {
                    let through = |t: usize| -> Option<usize> {
                        match next[t] {
                            Next::Linear(j) if t != u && !marked[t] && indegree(&next, &alive, t) == 1 => Some(j),
                            _ => None,
                        }
                    };
                    let ends: Vec<(usize, Option<usize>)> = ts.iter().map(|&t| (t, through(t))).collect();
                    let join = ends.iter().map(|(t, j)| j.unwrap_or(*t)).collect::<BTreeSet<_>>();
                    if join.len() != 1 {
                        continue;
                    }
                    let j = *join.iter().next().unwrap();
                    if j == u || marked[j] || indegree(&next, &alive, j) != ts.len() {
                        continue;
                    }
                    for (t, via) in ends {
                        if via.is_some() {
                            alive[t] = false;
                        }
                    }
                    next[u] = Next::Linear(j);
                    changed = true;
                }
                Next::Foreach(b) => {
                    let Next::Linear(j) = next[b] else { continue };
                    if b == u || marked[b] || indegree(&next, &alive, b) != 1 {
                        continue;
                    }
                    if j == b || j == u || !marked[j] || indegree(&next, &alive, j) != 1 {
                        continue;
                    }
                    alive[b] = false;
                    marked[j] = false;
                    next[u] = Next::Linear(j);
                    changed = true;
                }
                Next::Terminal => {}
            }
        }
        if !changed {
            break;
        }
    }
    alive.iter().filter(|a| **a).count() == 1 && next[0] == Next::Terminal && !marked[0]
}

/// Every topological order of the shape, as node indices.
pub fn all_orders(shape: &Shape) -> Vec<Vec<usize>> {
    fn go(shape: &Shape, indeg: &mut Vec<usize>, done: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == indeg.len() {
            out.push(cur.clone());
            return;
        }
        for v in 0..indeg.len() {
            if done[v] || indeg[v] != 0 {
                continue;
            }
            done[v] = true;
            cur.push(v);
            for t in shape.targets(v) {
                indeg[t] -= 1;
            }
            go(shape, indeg, done, cur, out);
            for t in shape.targets(v) {
                indeg[t] += 1;
            }
            cur.pop();
            done[v] = false;
        }
    }
    let n = shape.next.len();
    let mut indeg = vec![0; n];
    for v in 0..n {
        for t in shape.targets(v) {
            indeg[t] += 1;
        }
    }
    let mut out = Vec::new();
    go(shape, &mut indeg, &mut vec![false; n], &mut Vec::new(), &mut out);
    out
}


/// All transitions from node `i` in a graph of `n` nodes.
pub fn choices(n: usize) -> Vec<Next> {
    let mut out: Vec<Next> = (0..n).map(Next::Linear).collect();
    out.extend((0..n).map(Next::Foreach));
    for mask in 0u32..(1 << n) {
        if mask.count_ones() >= 2 {
            out.push(Next::Split((0..n).filter(|b| mask & (1 << b) != 0).collect()));
        }
    }
    out
}

/// Every flow on `2..=max_nodes` nodes: each non-`end` node takes any
/// transition and every node but `start` may carry a join marker.
pub fn small_shapes(max_nodes: usize) -> impl Iterator<Item = Shape> {
    (2..=max_nodes).flat_map(|n| {
        let opts = choices(n);
        let combos = opts.len().pow(n as u32 - 1) * (1 << (n - 1));
        (0..combos).map(move |mut k| {
            let mut next = vec![Next::Terminal; n];
            for (i, slot) in next.iter_mut().enumerate() {
                if i == 1 {
                    continue;
                }
                *slot = opts[k % opts.len()].clone();
                k /= opts.len();
            }
            let marked: Vec<bool> = (0..n).map(|i| i > 0 && (k >> (i - 1)) & 1 == 1).collect();
            let mut decl: Vec<usize> = (0..n).collect();
            decl.swap(1, n - 1);
            Shape { next, marked, decl }
        })
    })
}
