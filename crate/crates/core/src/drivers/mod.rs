//! Role drivers: the JSON wire format shared by every driver kind, the
//! access-scope filter, and dispatch to builtin, external or replay drivers.

pub mod builtin;
pub mod external;
pub mod replay;

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use walkdir::WalkDir;

use crate::metrics::MetricsArtifact;
use crate::review::{DeltaRecord, GuardReport, Stage, Verdict};
use crate::spec::{AccessScope, DriverBinding, Role, TaskType};

pub use replay::{Directive, ReplayTrace, TraceEntry};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_DRIVER_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("{role} driver timed out after {timeout:?}")]
    Timeout { role: Role, timeout: Duration },
    #[error("{role} driver exited with {code:?}: {stderr}")]
    NonZeroExit {
        role: Role,
        code: Option<i32>,
        stderr: String,
    },
    #[error("{role} driver returned an invalid response: {message}")]
    InvalidResponse { role: Role, message: String },
    #[error("{role} driver could not be started: {message}")]
    Spawn { role: Role, message: String },
    #[error("unknown builtin driver `{0}`")]
    UnknownBuiltin(String),
    #[error("{role} driver failed: {message}")]
    Failed { role: Role, message: String },
    #[error("no driver bound for role {0}")]
    Unbound(Role),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptedSummary {
    pub metrics: MetricsArtifact,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraints {
    pub admissible_changes: String,
    pub max_rounds: u32,
    pub max_retries_per_round: u32,
    pub samples: u32,
    pub access_scope: AccessScope,
}

/// A prior try as shown to drivers. Metrics are filtered by access scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryItem {
    pub round: u32,
    #[serde(rename = "try")]
    pub tries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsArtifact>,
    pub verdict: Verdict,
}

/// What a critic sees when asked to comment on a try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewContext {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaRecord>,
    pub guards: GuardReport,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverRequest {
    pub protocol_version: u32,
    pub role: Role,
    pub round: u32,
    #[serde(rename = "try")]
    pub tries: u32,
    pub goal: String,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_summary: Option<AcceptedSummary>,
    pub visible_paths: Vec<PathBuf>,
    pub constraints: Constraints,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_reports: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<HistoryItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub investigation: Option<InvestigatorPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review: Option<ReviewContext>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerPayload {
    pub design: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvestigatorPayload {
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    pub has_hypothesis: bool,
    #[serde(default)]
    pub wants_retry_on_reject: bool,
    /// Structured form of the hypothesis, passed through to the executor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<Value>,
}

impl InvestigatorPayload {
    pub fn no_hypothesis(report: impl Into<String>) -> Self {
        Self {
            report: report.into(),
            hypothesis: None,
            has_hypothesis: false,
            wants_retry_on_reject: false,
            proposal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutorPayload {
    pub change: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suggestion {
    Accept,
    Reject,
    Retry,
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticPayload {
    pub suggestion: Suggestion,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", content = "payload", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverResponse {
    SeedPlanner(PlannerPayload),
    BaselineExecutor(BaselinePayload),
    Investigator(InvestigatorPayload),
    Executor(ExecutorPayload),
    Reviewer(CriticPayload),
}

impl DriverResponse {
    pub fn role(&self) -> Role {
        match self {
            DriverResponse::SeedPlanner(_) => Role::SeedPlanner,
            DriverResponse::BaselineExecutor(_) => Role::BaselineExecutor,
            DriverResponse::Investigator(_) => Role::Investigator,
            DriverResponse::Executor(_) => Role::Executor,
            DriverResponse::Reviewer(_) => Role::Reviewer,
        }
    }

    /// Checks the payload invariants against the request it answers.
    pub fn validate(&self, request: &DriverRequest) -> Result<(), String> {
        if self.role() != request.role {
            return Err(format!(
                "response role {} does not match requested role {}",
                self.role(),
                request.role
            ));
        }
        match self {
            DriverResponse::Investigator(p) => {
                if !p.has_hypothesis && p.hypothesis.is_some() {
                    return Err("hypothesis present although has_hypothesis is false".into());
                }
            }
            DriverResponse::Executor(ExecutorPayload { files, .. })
            | DriverResponse::BaselineExecutor(BaselinePayload { files, .. }) => {
                for f in files {
                    if !stays_inside(f, request.candidate_dir.as_deref()) {
                        return Err(format!("file {} lies outside the candidate directory", f.display()));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn stays_inside(file: &Path, root: Option<&Path>) -> bool {
    let rel = match (file.is_absolute(), root) {
        (true, Some(root)) => match file.strip_prefix(root) {
            Ok(rel) => rel,
            Err(_) => return false,
        },
        (true, None) => return false,
        (false, _) => file,
    };
    let mut depth = 0i32;
    for c in rel.components() {
        match c {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                depth -= 1;
                if depth < 0 {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// Lexical normalization: drops `.` and resolves `..` without touching disk.
pub fn normalize_path(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Paths a role may see under `scope`. `train` and `eval` are the split
/// locations relative to `root` (a file or a directory).
pub fn filter_visible(
    paths: &[PathBuf],
    root: &Path,
    scope: AccessScope,
    train: Option<&Path>,
    eval: Option<&Path>,
) -> Vec<PathBuf> {
    let hidden: Option<PathBuf> = match scope {
        AccessScope::TrainOnly => eval.map(|e| normalize_path(&root.join(e))),
        AccessScope::EvalOnly => train.map(|t| normalize_path(&root.join(t))),
        AccessScope::FullVisibleTests | AccessScope::Custom => None,
    };
    paths
        .iter()
        .filter(|p| {
            let p = normalize_path(&root.join(p));
            hidden.as_ref().is_none_or(|h| !p.starts_with(h))
        })
        .cloned()
        .collect()
}

/// Every file below `root` (sorted, absolute) that `scope` allows.
pub fn visible_paths(
    root: &Path,
    scope: AccessScope,
    train: Option<&Path>,
    eval: Option<&Path>,
) -> Vec<PathBuf> {
    let all: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .collect();
    filter_visible(&all, root, scope, train, eval)
}

/// Short description of what a task type may change.
pub fn admissible_changes(task_type: TaskType) -> &'static str {
    match task_type {
        TaskType::PromptTune => "prompt artifacts only; the model stays fixed",
        TaskType::Finetune => "declared hyperparameters only; the architecture stays fixed",
        TaskType::RuleBased => "rule thresholds, conditions and precedence",
        TaskType::CodeImprovement => "program logic; visible tests must keep passing once they pass",
        TaskType::Custom => "as described by the task goal",
    }
}

/// A bound driver, ready to be invoked.
#[derive(Debug, Clone)]
pub enum Driver {
    Builtin(String),
    External { argv: Vec<String>, timeout: Duration },
    Replay(Arc<ReplayTrace>),
}

impl Driver {
    pub fn from_binding(binding: &DriverBinding, trace: Option<&Arc<ReplayTrace>>) -> Option<Driver> {
        Some(match binding {
            DriverBinding::Builtin { name } => Driver::Builtin(name.clone()),
            DriverBinding::Command { argv, timeout_secs } => Driver::External {
                argv: argv.clone(),
                timeout: timeout_secs.map_or(DEFAULT_DRIVER_TIMEOUT, Duration::from_secs),
            },
            DriverBinding::Replay { .. } => Driver::Replay(trace?.clone()),
        })
    }

    pub fn invoke(&self, request: &DriverRequest) -> Result<DriverResponse, DriverError> {
        let response = match self {
            Driver::Builtin(name) => builtin::invoke(name, request)?,
            Driver::External { argv, timeout } => external::invoke_external(argv, request, *timeout)?,
            Driver::Replay(trace) => replay::invoke(trace, request)?,
        };
        response.validate(request).map_err(|message| DriverError::InvalidResponse {
            role: request.role,
            message,
        })?;
        Ok(response)
    }
}
