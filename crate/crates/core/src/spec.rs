//! Task specification: the declarative document a run starts from.
//!
//! The document is YAML with the sections `project`, `run`, `phases`,
//! `roles`, `data`, `model`, `investigation`, `evaluation`, `tracking`, `git`
//! and an engine-specific `drivers` section. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drivers::builtin;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("spec parse error: {0}")]
    Parse(String),
    #[error("spec schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
}

impl SpecError {
    fn schema(path: &str, message: impl Into<String>) -> Self {
        SpecError::Schema {
            path: path.to_string(),
            message: message.into(),
        }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            SpecError::Parse(_) => None,
            SpecError::Schema { path, .. } => Some(path),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    PromptTune,
    Finetune,
    RuleBased,
    CodeImprovement,
    Custom,
}

impl TaskType {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::PromptTune => "prompt_tune",
            TaskType::Finetune => "finetune",
            TaskType::RuleBased => "rule_based",
            TaskType::CodeImprovement => "code_improvement",
            TaskType::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewerMode {
    #[default]
    MetricDriven,
    LlmCritic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelType {
    Llm,
    MlModel,
    RuleSystem,
    Code,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessScope {
    TrainOnly,
    EvalOnly,
    FullVisibleTests,
    #[default]
    Custom,
}

impl AccessScope {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessScope::TrainOnly => "train_only",
            AccessScope::EvalOnly => "eval_only",
            AccessScope::FullVisibleTests => "full_visible_tests",
            AccessScope::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    Absolute,
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingBackend {
    LocalLogs,
    #[default]
    StructuredFiles,
    GithubPrs,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardName {
    OverfitGap,
    Leakage,
    StagedCorrectness,
    DeterminismCache,
}

impl GuardName {
    pub fn as_str(self) -> &'static str {
        match self {
            GuardName::OverfitGap => "overfit_gap",
            GuardName::Leakage => "leakage",
            GuardName::StagedCorrectness => "staged_correctness",
            GuardName::DeterminismCache => "determinism_cache",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "overfit_gap" => GuardName::OverfitGap,
            "leakage" => GuardName::Leakage,
            "staged_correctness" => GuardName::StagedCorrectness,
            "determinism_cache" => GuardName::DeterminismCache,
            _ => return None,
        })
    }
}

impl fmt::Display for GuardName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the primary metric is read from in a metrics artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    EvalSplit,
    Timings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SeedPlanner,
    BaselineExecutor,
    Investigator,
    Executor,
    Reviewer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::SeedPlanner => "seed_planner",
            Role::BaselineExecutor => "baseline_executor",
            Role::Investigator => "investigator",
            Role::Executor => "executor",
            Role::Reviewer => "reviewer",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Project {
    pub name: String,
    pub slug: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub goal: String,
    pub task_type: TaskType,
    pub max_rounds: u32,
    pub max_retries_per_round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phases {
    #[serde(default = "yes")]
    pub baseline_construction: bool,
    #[serde(default = "yes")]
    pub multi_round_optimization: bool,
}

impl Default for Phases {
    fn default() -> Self {
        Self {
            baseline_construction: true,
            multi_round_optimization: true,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewerRole {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub mode: ReviewerMode,
}

impl Default for ReviewerRole {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: ReviewerMode::MetricDriven,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    #[serde(default = "yes")]
    pub seed_planner: bool,
    #[serde(default = "yes")]
    pub baseline_executor: bool,
    #[serde(default = "yes")]
    pub orchestrator: bool,
    #[serde(default = "yes")]
    pub investigator: bool,
    #[serde(default = "yes")]
    pub executor: bool,
    #[serde(default)]
    pub reviewer: ReviewerRole,
}

impl Default for Roles {
    fn default() -> Self {
        Self {
            seed_planner: true,
            baseline_executor: true,
            orchestrator: true,
            investigator: true,
            executor: true,
            reviewer: ReviewerRole::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub train_split: Option<String>,
    #[serde(default)]
    pub eval_split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "type")]
    pub kind: ModelType,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Investigation {
    #[serde(default)]
    pub samples: u32,
    #[serde(default)]
    pub access_scope: AccessScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    pub primary_metric: String,
    #[serde(default)]
    pub metric_direction: Option<Direction>,
    pub min_delta: f64,
    #[serde(default)]
    pub delta_mode: Option<DeltaMode>,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub train_cmd: Option<String>,
    #[serde(default)]
    pub eval_cmd: Option<String>,
    #[serde(default)]
    pub acceptance_rule: String,
    #[serde(default)]
    pub max_train_eval_gap: Option<f64>,
    #[serde(default)]
    pub saturation_bound: Option<f64>,
    /// Declares the primary metric accuracy-like: values must lie in [0, 1]
    /// and saturation defaults to 1.0.
    #[serde(default)]
    pub bounded: bool,
    #[serde(default)]
    pub metric_source: Option<MetricSource>,
    /// Replaces the task type's default guard list when present.
    #[serde(default)]
    pub guards: Option<Vec<GuardName>>,
    #[serde(default)]
    pub eval_timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tracking {
    #[serde(default)]
    pub backend: TrackingBackend,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Git {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default)]
    pub target_branch: Option<String>,
}

/// How a role (or the evaluator) is realized for this task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverBinding {
    Builtin {
        name: String,
    },
    Command {
        argv: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_secs: Option<u64>,
    },
    Replay {
        trace: PathBuf,
    },
}

impl DriverBinding {
    pub fn is_replay(&self) -> bool {
        matches!(self, DriverBinding::Replay { .. })
    }

    pub fn is_builtin(&self) -> bool {
        matches!(self, DriverBinding::Builtin { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Drivers {
    #[serde(default)]
    pub seed_planner: Option<DriverBinding>,
    #[serde(default)]
    pub baseline_executor: Option<DriverBinding>,
    #[serde(default)]
    pub investigator: Option<DriverBinding>,
    #[serde(default)]
    pub executor: Option<DriverBinding>,
    #[serde(default)]
    pub reviewer: Option<DriverBinding>,
    /// Builtin evaluator used instead of (or when there is no) `eval_cmd`.
    #[serde(default)]
    pub evaluator: Option<DriverBinding>,
}

impl Drivers {
    pub fn for_role(&self, role: Role) -> Option<&DriverBinding> {
        match role {
            Role::SeedPlanner => self.seed_planner.as_ref(),
            Role::BaselineExecutor => self.baseline_executor.as_ref(),
            Role::Investigator => self.investigator.as_ref(),
            Role::Executor => self.executor.as_ref(),
            Role::Reviewer => self.reviewer.as_ref(),
        }
    }

    fn all(&self) -> impl Iterator<Item = (&'static str, &DriverBinding)> {
        [
            ("seed_planner", &self.seed_planner),
            ("baseline_executor", &self.baseline_executor),
            ("investigator", &self.investigator),
            ("executor", &self.executor),
            ("reviewer", &self.reviewer),
            ("evaluator", &self.evaluator),
        ]
        .into_iter()
        .filter_map(|(name, b)| b.as_ref().map(|b| (name, b)))
    }

    /// The trace path shared by every replay binding, if any role replays.
    pub fn replay_trace(&self) -> Option<&Path> {
        self.all().find_map(|(_, b)| match b {
            DriverBinding::Replay { trace } => Some(trace.as_path()),
            _ => None,
        })
    }

    /// Rebinds every protocol role to replay the given trace. The reviewer
    /// keeps its binding: a critic can still comment on replayed rounds.
    pub fn replay_all(&mut self, trace: &Path) {
        let binding = DriverBinding::Replay {
            trace: trace.to_path_buf(),
        };
        self.seed_planner = Some(binding.clone());
        self.baseline_executor = Some(binding.clone());
        self.investigator = Some(binding.clone());
        self.executor = Some(binding);
        self.evaluator = None;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub project: Project,
    pub run: RunSection,
    #[serde(default)]
    pub phases: Phases,
    #[serde(default)]
    pub roles: Roles,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub investigation: Investigation,
    pub evaluation: Evaluation,
    #[serde(default)]
    pub tracking: Tracking,
    #[serde(default)]
    pub git: Git,
    #[serde(default)]
    pub drivers: Drivers,
}

/// One failed invariant, addressed by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    fn new(path: &str, message: impl Into<String>) -> Self {
        Self {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub fn parse_spec(text: &str) -> Result<TaskSpec, SpecError> {
    // Syntax first, so a malformed document is not reported as a schema error.
    let _: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| SpecError::Parse(e.to_string()))?;
    let de = serde_yaml::Deserializer::from_str(text);
    let spec: TaskSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        // serde_yaml appends its own location; the dotted path is enough.
        let message = inner
            .split(" at line ")
            .next()
            .unwrap_or(&inner)
            .to_string();
        SpecError::Schema { path, message }
    })?;
    check_ranges(&spec)?;
    Ok(spec)
}

pub fn parse_spec_file(path: &Path) -> Result<TaskSpec, SpecError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SpecError::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_spec(&text)
}

pub fn serialize_spec(spec: &TaskSpec) -> String {
    serde_yaml::to_string(spec).expect("task spec serializes to YAML")
}

/// Per-field range checks that a typed deserializer cannot express.
fn check_ranges(spec: &TaskSpec) -> Result<(), SpecError> {
    if spec.run.max_rounds < 1 {
        return Err(SpecError::schema("run.max_rounds", "must be at least 1"));
    }
    let e = &spec.evaluation;
    if !e.min_delta.is_finite() || e.min_delta < 0.0 {
        return Err(SpecError::schema(
            "evaluation.min_delta",
            "must be a finite non-negative number",
        ));
    }
    if let Some(gap) = e.max_train_eval_gap {
        if !gap.is_finite() || gap <= 0.0 {
            return Err(SpecError::schema(
                "evaluation.max_train_eval_gap",
                "must be a finite positive number",
            ));
        }
    }
    if let Some(bound) = e.saturation_bound {
        if !bound.is_finite() {
            return Err(SpecError::schema(
                "evaluation.saturation_bound",
                "must be finite",
            ));
        }
    }
    Ok(())
}

fn is_slug(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
}

pub fn validate_spec(spec: &TaskSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let ev = &spec.evaluation;
    let drivers = &spec.drivers;

    if !is_slug(&spec.project.slug) {
        out.push(Violation::new(
            "project.slug",
            "must be non-empty and use only [a-z0-9_-]",
        ));
    }
    if spec.run.max_rounds < 1 {
        out.push(Violation::new("run.max_rounds", "must be at least 1"));
    }
    if !ev.min_delta.is_finite() || ev.min_delta < 0.0 {
        out.push(Violation::new(
            "evaluation.min_delta",
            "must be a finite non-negative number",
        ));
    }
    if ev.primary_metric.trim().is_empty() {
        out.push(Violation::new("evaluation.primary_metric", "must not be empty"));
    }
    if let Some(gap) = ev.max_train_eval_gap {
        if !gap.is_finite() || gap <= 0.0 {
            out.push(Violation::new(
                "evaluation.max_train_eval_gap",
                "must be a finite positive number",
            ));
        }
    }
    if ev.saturation_bound.is_some_and(|b| !b.is_finite()) {
        out.push(Violation::new("evaluation.saturation_bound", "must be finite"));
    }
    if spec.investigation.access_scope == AccessScope::TrainOnly && spec.data.train_split.is_none() {
        out.push(Violation::new(
            "investigation.access_scope",
            "train_only requires data.train_split",
        ));
    }
    if spec.roles.reviewer.mode == ReviewerMode::LlmCritic && drivers.reviewer.is_none() {
        out.push(Violation::new(
            "roles.reviewer.mode",
            "llm_critic requires a drivers.reviewer binding",
        ));
    }

    let replaying = drivers.replay_trace().is_some();
    let builtin_evaluator = drivers.evaluator.as_ref().is_some_and(DriverBinding::is_builtin);
    let has_eval_cmd = ev.eval_cmd.as_deref().is_some_and(|c| !c.trim().is_empty());
    if !has_eval_cmd && !builtin_evaluator && !replaying {
        out.push(Violation::new(
            "evaluation.eval_cmd",
            "required unless a builtin evaluator or replay trace supplies metrics",
        ));
    }
    if !spec.phases.baseline_construction && !has_eval_cmd && !builtin_evaluator && !replaying {
        out.push(Violation::new(
            "phases.baseline_construction",
            "baseline validation needs eval_cmd, a builtin evaluator or a replay trace",
        ));
    }
    if spec.phases.multi_round_optimization {
        if !spec.roles.investigator {
            out.push(Violation::new(
                "roles.investigator",
                "multi-round optimization requires the investigator role",
            ));
        } else if drivers.investigator.is_none() {
            out.push(Violation::new(
                "drivers.investigator",
                "multi-round optimization requires an investigator binding",
            ));
        }
        if !spec.roles.executor {
            out.push(Violation::new(
                "roles.executor",
                "multi-round optimization requires the executor role",
            ));
        } else if drivers.executor.is_none() {
            out.push(Violation::new(
                "drivers.executor",
                "multi-round optimization requires an executor binding",
            ));
        }
    }

    let mut traces = BTreeSet::new();
    for (name, binding) in drivers.all() {
        let path = format!("drivers.{name}");
        match binding {
            DriverBinding::Builtin { name: builtin_name } => {
                let known = if name == "evaluator" {
                    builtin::is_evaluator(builtin_name)
                } else {
                    builtin::is_driver(builtin_name)
                };
                if !known {
                    out.push(Violation::new(
                        &path,
                        format!("unknown builtin `{builtin_name}`"),
                    ));
                }
            }
            DriverBinding::Command { argv, timeout_secs } => {
                if argv.is_empty() || argv[0].trim().is_empty() {
                    out.push(Violation::new(&path, "command argv must not be empty"));
                }
                if *timeout_secs == Some(0) {
                    out.push(Violation::new(&path, "timeout_secs must be positive"));
                }
            }
            DriverBinding::Replay { trace } => {
                if name == "reviewer" || name == "evaluator" {
                    out.push(Violation::new(&path, "replay is only valid for protocol roles"));
                }
                traces.insert(trace.clone());
            }
        }
    }
    if traces.len() > 1 {
        out.push(Violation::new(
            "drivers",
            "all replay bindings must reference the same trace",
        ));
    }
    out
}

impl TaskSpec {
    /// Makes relative `data.source` and replay trace paths absolute against
    /// `base` (normally the directory holding the spec file), so the
    /// effective spec stays valid after being copied into a run directory.
    pub fn rebase_paths(&mut self, base: &Path) {
        let source = Path::new(&self.data.source);
        if !self.data.source.is_empty() && source.is_relative() && base.join(source).exists() {
            self.data.source = base.join(source).to_string_lossy().into_owned();
        }
        let rebase = |binding: &mut Option<DriverBinding>| {
            if let Some(DriverBinding::Replay { trace }) = binding {
                if trace.is_relative() {
                    *trace = base.join(&*trace);
                }
            }
        };
        let d = &mut self.drivers;
        rebase(&mut d.seed_planner);
        rebase(&mut d.baseline_executor);
        rebase(&mut d.investigator);
        rebase(&mut d.executor);
        rebase(&mut d.reviewer);
        rebase(&mut d.evaluator);
    }
}
