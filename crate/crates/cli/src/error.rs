use std::fmt::Display;
use std::process::ExitCode;

use flowmill_core::cards::CardError;
use flowmill_core::client::ClientError;
use flowmill_core::flow::{FlowError, ValidationReport};
use flowmill_core::runtime::RuntimeError;
use serde_json::{json, Value};

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    User,
    Execution,
}

#[derive(Debug)]
pub struct CliError {
    class: Class,
    kind: String,
    message: String,
    report: Option<ValidationReport>,
}

impl CliError {
    pub fn user(kind: impl Into<String>, message: impl Into<String>) -> CliError {
        CliError { class: Class::User, kind: kind.into(), message: message.into(), report: None }
    }

    pub fn execution(e: impl Display) -> CliError {
        CliError { class: Class::Execution, kind: "execution".into(), message: e.to_string(), report: None }
    }

    pub fn invalid_flow(report: ValidationReport) -> CliError {
        CliError { report: Some(report), ..CliError::user("invalid_flow", "flow failed validation") }
    }

    pub fn from_flow(e: FlowError) -> CliError {
        match e {
            FlowError::Invalid(report) => CliError::invalid_flow(report),
            FlowError::Syntax(_) => CliError::user("syntax", e.to_string()),
            FlowError::Schema(_) | FlowError::DuplicateStep(_) => CliError::user("schema", e.to_string()),
        }
    }

    pub fn from_runtime(e: RuntimeError) -> CliError {
        use RuntimeError::*;
        match e {
            InvalidFlow(report) => CliError::invalid_flow(report),
            MissingParameter(_) | UnknownParameter(_) => CliError::user("parameter", e.to_string()),
            UnknownStep(_) | UnknownRun(_) | NothingToResume(_) | FlowMismatch { .. } => {
                CliError::user("resume", e.to_string())
            }
            e => CliError::execution(e),
        }
    }

    pub fn from_client(e: ClientError) -> CliError {
        match e {
            ClientError::NotFound(_) => CliError::user("not_found", e.to_string()),
            ClientError::NamespaceMismatch { .. } => CliError::user("namespace", e.to_string()),
            e => CliError::execution(e),
        }
    }

    pub fn from_card(e: CardError) -> CliError {
        match e {
            CardError::RunNotTerminal(_) | CardError::NoEndTask(_) => CliError::user("card", e.to_string()),
            CardError::InvalidFlow(report) => CliError::invalid_flow(report),
            e => CliError::execution(e),
        }
    }

    fn code(&self) -> u8 {
        match self.class {
            Class::User => 1,
            Class::Execution => 2,
        }
    }

    /// Prints the error to stderr and returns the exit code.
    pub fn report(&self, json: bool) -> ExitCode {
        if json {
            let mut err = json!({"kind": self.kind, "exit_code": self.code(), "message": self.message});
            if let Some(r) = &self.report {
                err["diagnostics"] = serde_json::to_value(&r.diagnostics).unwrap_or(Value::Null);
            }
            eprintln!("{}", json!({ "error": err }));
        } else {
            eprintln!("error: {}", self.message);
            for d in self.report.iter().flat_map(|r| &r.diagnostics) {
                let step = d.step.as_deref().map(|s| format!(" [{s}]")).unwrap_or_default();
                eprintln!("  {}{step}: {}", d.code, d.message);
            }
        }
        ExitCode::from(self.code())
    }
}
