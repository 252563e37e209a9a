use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Hierarchical address of a run, step, task or artifact:
/// `flow/run[/step[/task[/artifact]]]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pathspec {
    pub flow: String,
    pub run_id: u64,
    pub step: Option<String>,
    pub task_id: Option<u64>,
    pub artifact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid pathspec `{0}`")]
pub struct PathspecError(pub String);

impl Pathspec {
    pub fn run(flow: impl Into<String>, run_id: u64) -> Self {
        Pathspec { flow: flow.into(), run_id, step: None, task_id: None, artifact: None }
    }

    pub fn step(flow: impl Into<String>, run_id: u64, step: impl Into<String>) -> Self {
        Pathspec { step: Some(step.into()), ..Pathspec::run(flow, run_id) }
    }

    pub fn task(flow: impl Into<String>, run_id: u64, step: impl Into<String>, task_id: u64) -> Self {
        Pathspec { task_id: Some(task_id), ..Pathspec::step(flow, run_id, step) }
    }

    pub fn artifact(&self, name: impl Into<String>) -> Self {
        assert!(self.task_id.is_some(), "artifact pathspecs need a task");
        Pathspec { artifact: Some(name.into()), ..self.clone() }
    }

    pub fn run_prefix(&self) -> Pathspec {
        Pathspec::run(self.flow.clone(), self.run_id)
    }
}

impl fmt::Display for Pathspec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.flow, self.run_id)?;
        if let Some(s) = &self.step {
            write!(f, "/{s}")?;
        }
        if let Some(t) = self.task_id {
            write!(f, "/{t}")?;
        }
        if let Some(a) = &self.artifact {
            write!(f, "/{a}")?;
        }
        Ok(())
    }
}

impl FromStr for Pathspec {
    type Err = PathspecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || PathspecError(s.to_string());
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() < 2 || parts.len() > 5 || parts.iter().any(|p| p.is_empty()) {
            return Err(err());
        }
        let number = |p: &str| -> Result<u64, PathspecError> {
            if p.bytes().all(|b| b.is_ascii_digit()) {
                p.parse().map_err(|_| err())
            } else {
                Err(err())
            }
        };
        Ok(Pathspec {
            flow: parts[0].to_string(),
            run_id: number(parts[1])?,
            step: parts.get(2).map(|s| s.to_string()),
            task_id: parts.get(3).map(|p| number(p)).transpose()?,
            artifact: parts.get(4).map(|s| s.to_string()),
        })
    }
}

impl Serialize for Pathspec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pathspec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?.parse().map_err(serde::de::Error::custom)
    }
}
