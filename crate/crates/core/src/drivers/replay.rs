//! Replay drivers: pre-recorded investigations, changes and metrics that
//! drive a run deterministically.
//!
//! A trace is a JSON array of entries keyed by `(round, try)`, with round 0
//! the baseline. Looking up a try the trace does not cover yields
//! "no hypothesis", which ends the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    BaselinePayload, DriverError, DriverRequest, DriverResponse, ExecutorPayload, InvestigatorPayload,
    PlannerPayload,
};
use crate::metrics::MetricsArtifact;
use crate::spec::Role;

pub const CHANGE_FILE: &str = "change.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Retry,
    Advance,
    NoHypothesis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub round: u32,
    #[serde(rename = "try", default)]
    pub tries: u32,
    #[serde(default)]
    pub investigation: String,
    #[serde(default)]
    pub change: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsArtifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directive: Option<Directive>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplayTrace {
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid trace: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("replay trace exhausted")]
pub struct Exhausted;

impl ReplayTrace {
    pub fn parse(bytes: &[u8]) -> Result<Self, TraceError> {
        let mut de = serde_json::Deserializer::from_slice(bytes);
        let trace: ReplayTrace = serde_path_to_error::deserialize(&mut de).map_err(|e| TraceError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        de.end().map_err(|e| TraceError::Schema {
            path: ".".into(),
            message: e.to_string(),
        })?;
        trace.check()?;
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        let bytes = fs::read(path).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&bytes)
    }

    fn check(&self) -> Result<(), TraceError> {
        for w in self.entries.windows(2) {
            if (w[0].round, w[0].tries) >= (w[1].round, w[1].tries) {
                return Err(TraceError::Invalid(format!(
                    "entries out of order: ({}, {}) then ({}, {})",
                    w[0].round, w[0].tries, w[1].round, w[1].tries
                )));
            }
        }
        for (i, e) in self.entries.iter().enumerate() {
            match (&e.metrics, e.directive) {
                (None, Some(Directive::NoHypothesis)) => {}
                (None, _) => {
                    return Err(TraceError::Invalid(format!(
                        "entry {i} (round {}, try {}) has no metrics",
                        e.round, e.tries
                    )))
                }
                (Some(m), _) => m.validate(&[]).map_err(|err| TraceError::Schema {
                    path: format!("[{i}].metrics"),
                    message: err.to_string(),
                })?,
            }
        }
        Ok(())
    }

    pub fn entry(&self, round: u32, tries: u32) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.round == round && e.tries == tries)
    }

    pub fn metrics_for(&self, round: u32, tries: u32) -> Option<&MetricsArtifact> {
        self.entry(round, tries)?.metrics.as_ref()
    }

    /// Sequential access: the entry at `cursor` and the next cursor.
    pub fn replay_next(&self, cursor: usize) -> Result<(&TraceEntry, usize), Exhausted> {
        self.entries.get(cursor).map(|e| (e, cursor + 1)).ok_or(Exhausted)
    }
}

impl TraceEntry {
    pub fn investigation_payload(&self) -> InvestigatorPayload {
        if self.directive == Some(Directive::NoHypothesis) {
            return InvestigatorPayload::no_hypothesis(self.investigation.clone());
        }
        InvestigatorPayload {
            report: self.investigation.clone(),
            hypothesis: Some(self.change.clone()),
            has_hypothesis: true,
            wants_retry_on_reject: self.directive == Some(Directive::Retry),
            proposal: None,
        }
    }
}

fn write_change(request: &DriverRequest, change: &str) -> Result<Vec<PathBuf>, DriverError> {
    let dir = request.candidate_dir.as_ref().ok_or(DriverError::Failed {
        role: request.role,
        message: "no candidate directory in request".into(),
    })?;
    fs::write(dir.join(CHANGE_FILE), format!("{change}\n")).map_err(|e| DriverError::Failed {
        role: request.role,
        message: e.to_string(),
    })?;
    Ok(vec![PathBuf::from(CHANGE_FILE)])
}

pub fn invoke(trace: &ReplayTrace, request: &DriverRequest) -> Result<DriverResponse, DriverError> {
    let role = request.role;
    let entry = trace.entry(request.round, request.tries);
    let missing = || DriverError::Failed {
        role,
        message: format!("trace has no entry for round {} try {}", request.round, request.tries),
    };
    Ok(match role {
        Role::SeedPlanner => DriverResponse::SeedPlanner(PlannerPayload {
            design: entry.map_or_else(|| "replayed baseline".to_string(), |e| e.investigation.clone()),
        }),
        Role::BaselineExecutor => {
            let e = entry.ok_or_else(missing)?;
            DriverResponse::BaselineExecutor(BaselinePayload {
                description: Some(e.change.clone()),
                files: write_change(request, &e.change)?,
            })
        }
        Role::Investigator => DriverResponse::Investigator(match entry {
            Some(e) => e.investigation_payload(),
            None => InvestigatorPayload::no_hypothesis("replay trace exhausted"),
        }),
        Role::Executor => {
            let e = entry.ok_or_else(missing)?;
            DriverResponse::Executor(ExecutorPayload {
                change: e.change.clone(),
                files: write_change(request, &e.change)?,
            })
        }
        Role::Reviewer => {
            return Err(DriverError::Failed {
                role,
                message: "replay cannot act as a reviewer".into(),
            })
        }
    })
}
