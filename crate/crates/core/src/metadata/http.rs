//! Read-only HTTP view of the metadata store.
//!
//! `GET /flows`, `/flows/{f}/runs`, `/flows/{f}/runs/{r}` and
//! `/flows/{f}/runs/{r}/tasks`, all answering JSON.

use std::net::ToSocketAddrs;

use serde_json::json;

use super::{MetadataError, MetadataStore};

/// Answers one request path with `(status code, JSON body)`.
pub fn route(meta: &MetadataStore, path: &str) -> (u16, String) {
    let path = path.split('?').next().unwrap_or_default();
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    let result = match parts.as_slice() {
        ["flows"] => meta.flows().map(|f| json!(f)),
        ["flows", flow, "runs"] => meta.runs(flow).map(|r| json!(r)),
        ["flows", flow, "runs", run] => match run.parse() {
            Ok(id) => meta.run(flow, id).map(|r| json!(r)),
            Err(_) => return not_found(),
        },
        ["flows", flow, "runs", run, "tasks"] => match run.parse() {
            Ok(id) => meta.tasks(flow, id).map(|t| json!(t)),
            Err(_) => return not_found(),
        },
        _ => return not_found(),
    };
    match result {
        Ok(body) => (200, body.to_string()),
        Err(e @ (MetadataError::UnknownRun(_) | MetadataError::InvalidFlow(_))) => {
            (404, json!({"error": e.to_string()}).to_string())
        }
        Err(e) => (500, json!({"error": e.to_string()}).to_string()),
    }
}

fn not_found() -> (u16, String) {
    (404, json!({"error": "not found"}).to_string())
}

/// Serves requests until the process exits.
pub fn serve(meta: MetadataStore, addr: impl ToSocketAddrs) -> std::io::Result<()> {
    let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
    serve_on(meta, server);
    Ok(())
}

pub fn serve_on(meta: MetadataStore, server: tiny_http::Server) {
    let content_type = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    for request in server.incoming_requests() {
        let (code, body) = if *request.method() == tiny_http::Method::Get {
            route(&meta, request.url())
        } else {
            (405, json!({"error": "read-only"}).to_string())
        };
        let response = tiny_http::Response::from_string(body)
            .with_status_code(code)
            .with_header(content_type.clone());
        if let Err(e) = request.respond(response) {
            tracing::debug!(error = %e, "failed to answer metadata request");
        }
    }
}
