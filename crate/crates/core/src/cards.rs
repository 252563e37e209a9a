//! Static HTML cards documenting a finished run.
//!
//! A card is a single self-contained document: the flow structure as
//! nested lists, a table of run metadata and one row per task with its
//! artifacts. Everything except the one `<time>` element is a pure
//! function of the run's records and artifact values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::Value;

use crate::cas::{ArtifactValue, ContentHash, Store, StoreError};
use crate::flow::{analyze, FlowGraph, FlowSpec, Transition, ValidationReport, START};
use crate::metadata::{MetadataError, MetadataStore, Pathspec, RunRecord, Status, TaskRecord, CARD_ARTIFACT};

/// Arrays up to this many elements get an inline preview.
pub const PREVIEW_MAX_ELEMENTS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CardError {
    #[error("run {0} has not finished")]
    RunNotTerminal(Pathspec),
    #[error("run {0} has no successful end task to attach the card to")]
    NoEndTask(Pathspec),
    #[error("invalid flow: {0}")]
    InvalidFlow(ValidationReport),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse;margin-bottom:1.5em}\
td,th{border:1px solid #ccc;padding:.25em .5em;text-align:left;vertical-align:top}\
code{font-size:.9em}.ann{color:#666;font-style:italic}\
.SUCCEEDED{color:#17702a}.FAILED{color:#a31515}";

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Short textual rendering of a value, or its kind and size.
pub fn preview(value: &ArtifactValue) -> String {
    match value {
        ArtifactValue::Bytes(b) => format!("bytes, {} B", b.len()),
        ArtifactValue::Json(Value::Array(items)) if items.len() > PREVIEW_MAX_ELEMENTS => {
            format!("json array, {} elements", items.len())
        }
        ArtifactValue::Json(Value::Object(map)) => format!("json object, {} keys", map.len()),
        ArtifactValue::Json(v) => String::from_utf8(value.payload()).unwrap_or_else(|_| v.to_string()),
    }
}

pub fn render_card(store: &Store, run: &RunRecord, tasks: &[TaskRecord], spec: &FlowSpec) -> Result<String, CardError> {
    if !run.status.is_terminal() {
        return Err(CardError::RunNotTerminal(run.pathspec()));
    }
    let graph = analyze(spec).map_err(CardError::InvalidFlow)?;
    let mut h = String::new();
    let title = format!("{} / {}", run.flow, run.run_id);
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n",
        esc(&title)
    );
    let created = run.created_at.to_rfc3339();
    let _ = writeln!(h, "<h1>{}</h1>\n<p>Run created <time datetime=\"{created}\">{created}</time></p>", esc(&title));

    h.push_str("<h2>Structure</h2>\n<ul class=\"dag\">\n");
    let fanout = foreach_cardinalities(store, tasks, spec)?;
    render_steps(&mut h, spec, &graph, START, None, &fanout, 1);
    h.push_str("</ul>\n");

    h.push_str("<h2>Run</h2>\n<table class=\"run\">\n");
    let tags: Vec<&str> = run.tags.iter().map(String::as_str).collect();
    let rows = [
        ("flow", esc(&run.flow)),
        ("run id", run.run_id.to_string()),
        ("user", esc(&run.user)),
        ("tags", esc(&tags.join(", "))),
        ("status", format!("<span class=\"{0}\">{0}</span>", run.status)),
        ("code package", format!("<code>{}</code>", run.code_package)),
    ];
    for (k, v) in rows {
        let _ = writeln!(h, "<tr><th>{k}</th><td>{v}</td></tr>");
    }
    if let Some(origin) = &run.cloned_from {
        let _ = writeln!(h, "<tr><th>resumed from</th><td>{}</td></tr>", esc(&origin.to_string()));
    }
    let _ = writeln!(h, "<tr><th>parameters</th><td>{}</td></tr>", artifact_table(store, &run.parameters)?);
    h.push_str("</table>\n");

    h.push_str("<h2>Tasks</h2>\n<table class=\"tasks\">\n<tr><th>task</th><th>step</th><th>foreach</th><th>attempt</th><th>status</th><th>artifacts</th></tr>\n");
    let mut sorted: Vec<&TaskRecord> = tasks.iter().collect();
    sorted.sort_by_key(|t| t.task_id);
    for t in sorted {
        let frames: Vec<String> = t.foreach_stack.iter().map(|f| format!("{}[{}/{}]", f.step, f.index, f.cardinality)).collect();
        let mut artifacts = t.artifacts.clone();
        artifacts.remove(CARD_ARTIFACT);
        let cloned = if t.cloned_from.is_some() { " <span class=\"ann\">(cloned)</span>" } else { "" };
        let _ = writeln!(
            h,
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td class=\"{3}\">{}{cloned}</td><td>{}</td></tr>",
            t.task_id,
            esc(&t.step),
            esc(&frames.join(" ")),
            t.attempt,
            t.status,
            artifact_table(store, &artifacts)?,
        );
    }
    h.push_str("</table>\n</body>\n</html>\n");
    Ok(h)
}

fn artifact_table(store: &Store, artifacts: &BTreeMap<String, ContentHash>) -> Result<String, CardError> {
    if artifacts.is_empty() {
        return Ok(String::new());
    }
    let mut h = String::from("<table>");
    for (name, hash) in artifacts {
        let value = store.get(hash)?;
        let _ = write!(
            h,
            "<tr><td>{}</td><td><code>{}</code></td><td>{}</td></tr>",
            esc(name),
            &hash.as_str()[..12],
            esc(&preview(&value))
        );
    }
    h.push_str("</table>");
    Ok(h)
}

/// Fan-out sizes observed per foreach step, sorted and deduplicated.
fn foreach_cardinalities(store: &Store, tasks: &[TaskRecord], spec: &FlowSpec) -> Result<BTreeMap<String, Vec<usize>>, CardError> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for t in tasks.iter().filter(|t| t.status == Status::Succeeded) {
        let Some(Transition::Foreach { foreach_key, .. }) = spec.step(&t.step).and_then(|s| s.transition.as_ref()) else {
            continue;
        };
        if let Some(hash) = t.artifacts.get(foreach_key) {
            if let ArtifactValue::Json(Value::Array(items)) = store.get(hash)? {
                out.entry(t.step.clone()).or_default().push(items.len());
            }
        }
    }
    for v in out.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    Ok(out)
}

/// Emits the chain of steps from `from` up to (excluding) `stop`.
fn render_steps(
    h: &mut String,
    spec: &FlowSpec,
    graph: &FlowGraph,
    from: &str,
    stop: Option<&str>,
    fanout: &BTreeMap<String, Vec<usize>>,
    depth: usize,
) {
    let pad = "  ".repeat(depth);
    let mut current = Some(from.to_string());
    while let Some(name) = current.take() {
        if Some(name.as_str()) == stop {
            return;
        }
        let Some(step) = spec.step(&name) else { return };
        let join = if graph.is_join(&name) { " <span class=\"ann\">join</span>" } else { "" };
        match &step.transition {
            None => {
                let _ = writeln!(h, "{pad}<li><code>{}</code>{join}</li>", esc(&name));
            }
            Some(Transition::Linear(next)) => {
                let _ = writeln!(h, "{pad}<li><code>{}</code>{join}</li>", esc(&name));
                current = Some(next.clone());
            }
            Some(Transition::Split(targets)) => {
                let closing = graph.join_of(&name).map(str::to_string);
                let _ = writeln!(h, "{pad}<li><code>{}</code>{join} <span class=\"ann\">split into {}</span>\n{pad}<ul>", esc(&name), targets.len());
                for (i, t) in targets.iter().enumerate() {
                    let _ = writeln!(h, "{pad}  <li>branch {}\n{pad}  <ul>", i + 1);
                    render_steps(h, spec, graph, t, closing.as_deref(), fanout, depth + 2);
                    let _ = writeln!(h, "{pad}  </ul></li>");
                }
                let _ = writeln!(h, "{pad}</ul></li>");
                current = closing;
            }
            Some(Transition::Foreach { target, foreach_key }) => {
                let sizes = fanout
                    .get(&name)
                    .map(|v| v.iter().map(|n| format!("×{n}")).collect::<Vec<_>>().join(", "))
                    .unwrap_or_else(|| "×?".to_string());
                let closing = graph.join_of(&name).map(str::to_string);
                let _ = writeln!(
                    h,
                    "{pad}<li><code>{}</code>{join} <span class=\"ann\">foreach {} over <code>{}</code></span>\n{pad}<ul>",
                    esc(&name),
                    sizes,
                    esc(foreach_key)
                );
                render_steps(h, spec, graph, target, closing.as_deref(), fanout, depth + 1);
                let _ = writeln!(h, "{pad}</ul></li>");
                current = closing;
            }
        }
    }
}

/// Attaches the card to the run's `end` task as bytes artifact `_card`.
/// Storing the same card again is a no-op.
pub fn store_card(
    store: &Store,
    meta: &MetadataStore,
    run: &RunRecord,
    tasks: &[TaskRecord],
    html: &str,
) -> Result<ContentHash, CardError> {
    let end = tasks
        .iter()
        .filter(|t| t.step == crate::flow::END && t.status == Status::Succeeded)
        .max_by_key(|t| t.task_id)
        .ok_or_else(|| CardError::NoEndTask(run.pathspec()))?;
    let hash = store.put(&ArtifactValue::Bytes(html.as_bytes().to_vec()))?;
    meta.record_artifacts(&end.pathspec(), &BTreeMap::from([(CARD_ARTIFACT.to_string(), hash.clone())]))?;
    Ok(hash)
}

/// The determinism region of a card: the document without its `<time>`
/// element.
pub fn determinism_region(html: &str) -> String {
    match (html.find("<time"), html.find("</time>")) {
        (Some(a), Some(b)) if a < b => format!("{}{}", &html[..a], &html[b + "</time>".len()..]),
        _ => html.to_string(),
    }
}
