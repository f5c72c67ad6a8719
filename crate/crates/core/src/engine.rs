//! Run orchestration: Phase I baseline, Phase II rounds, resume and report.
//!
//! Every try is committed to the store before its verdict is applied, so a
//! killed run resumes from the last committed try and, with deterministic
//! drivers, produces the same artifacts as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;
use walkdir::WalkDir;

use crate::demos;
use crate::drivers::{
    admissible_changes, visible_paths, AcceptedSummary, Constraints, Driver, DriverRequest, DriverResponse,
    HistoryItem, InvestigatorPayload, ReplayTrace, ReviewContext, PROTOCOL_VERSION,
};
use crate::harness::{snapshot_digest, EvalContext, Evaluation, Evaluator, Harness, MetricsCache, DEFAULT_EVAL_TIMEOUT};
use crate::metrics::{MetricsArtifact, TRAIN_SPLIT};
use crate::policy::{resolve_policy, ResolvedPolicy};
use crate::protocol::{should_terminate, step, Event, IllegalEvent, Phase, RunState};
use crate::review::{
    check_guards, collect_texts, compute_delta, current_stage, decide_verdict, rationale, read_examples, GuardContext,
    RejectReason, Verdict,
};
use crate::spec::{
    parse_spec, parse_spec_file, serialize_spec, validate_spec, AccessScope, DriverBinding, ReviewerMode, Role,
    SpecError, TaskSpec, Violation,
};
use crate::tracking::{
    display_label, history_item, internal_dir, label, load_state, new_run_id, now_utc, project_dir, render_summary,
    report_file, spec_copy_path, summarize, BaselineRecord, CandidateRecord, DeltaFile, Fault, InvestigationRecord,
    Loaded, Store, StoreError, Summary, TryArtifacts,
};

pub const EFFECTIVE_SPEC: &str = "effective_spec.yaml";
pub const OVERRIDES: &str = "overrides.json";
const DESIGN_FILE: &str = "design.md";
const BASELINE_CANDIDATE: &str = "baseline";
/// Task-directory subtrees copied into a validation-only baseline and
/// promoted back from the final accepted candidate.
const PROMOTED: [&str; 3] = ["src", "tests", "rules"];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("invalid spec:\n{}", list(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Trace(#[from] crate::drivers::replay::TraceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("baseline failed: {0}")]
    Baseline(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Protocol(#[from] IllegalEvent),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

impl EngineError {
    /// True when a simulated crash stopped the run.
    pub fn is_interrupted(&self) -> bool {
        matches!(self, EngineError::Store(StoreError::Interrupted(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_id: Option<String>,
    pub max_rounds: Option<u32>,
    pub replay: Option<PathBuf>,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Summary,
    pub loaded: Loaded,
    pub policy: ResolvedPolicy,
}

/// Reads, rebases and validates a spec file, applying CLI overrides.
/// `replay` rebinds every protocol role to the given trace.
pub fn load_spec(
    path: &Path,
    max_rounds: Option<u32>,
    replay: Option<&Path>,
) -> Result<(TaskSpec, String), EngineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut spec = parse_spec_file(path)?;
    let base = path
        .parent()
        .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
        .unwrap_or(Path::new("."));
    let base = base.canonicalize().map_err(io_err(base))?;
    spec.rebase_paths(&base);
    if let Some(n) = max_rounds {
        spec.run.max_rounds = n;
    }
    if let Some(trace) = replay {
        let trace = trace.canonicalize().map_err(io_err(trace))?;
        spec.drivers.replay_all(&trace);
    }
    let violations = validate_spec(&spec);
    if !violations.is_empty() {
        return Err(EngineError::Invalid(violations));
    }
    Ok((spec, text))
}

/// Starts a new run of `spec` under `workspace` and drives it to the end.
pub fn run(workspace: &Path, spec: TaskSpec, original: &str, opts: &RunOptions) -> Result<RunOutcome, EngineError> {
    let violations = validate_spec(&spec);
    if !violations.is_empty() {
        return Err(EngineError::Invalid(violations));
    }
    if spec.git.enabled {
        return Err(EngineError::Unsupported("git integration (git.enabled: true)".into()));
    }
    let slug = spec.project.slug.clone();
    let copy = spec_copy_path(workspace, &slug);
    fs::create_dir_all(copy.parent().expect("spec copy has a parent")).map_err(io_err(&copy))?;
    let run_id = opts.run_id.clone().unwrap_or_else(new_run_id);
    let run_dir = project_dir(workspace, &slug).join(&run_id);
    if run_dir.exists() {
        return Err(EngineError::Unsupported(format!("run directory {} already exists", run_dir.display())));
    }
    let trace = load_trace(&spec)?;
    let mut store = Store::create(workspace, &slug, &run_id, spec.tracking.backend)?;
    store.fault = opts.fault;
    fs::write(&copy, original).map_err(io_err(&copy))?;
    let eff = store.internal_file(EFFECTIVE_SPEC);
    fs::write(&eff, serialize_spec(&spec)).map_err(io_err(&eff))?;
    let mut overrides = BTreeMap::new();
    if let Some(n) = opts.max_rounds {
        overrides.insert("run.max_rounds", serde_json::json!(n));
    }
    if let Some(t) = &opts.replay {
        overrides.insert("drivers.replay", serde_json::json!(t));
    }
    let ov = store.internal_file(OVERRIDES);
    fs::write(&ov, crate::metrics::canonical_json(&overrides)).map_err(io_err(&ov))?;
    store.log_event(&format!("run {run_id} started"))?;
    let state = RunState::new(run_id);
    Engine::new(spec, store, trace, state, Vec::new())?.drive()
}

/// The effective spec recorded for an existing run.
pub fn run_spec(run_dir: &Path) -> Result<TaskSpec, EngineError> {
    let path = internal_dir(run_dir).join(EFFECTIVE_SPEC);
    if !path.exists() {
        return Err(StoreError::Empty(run_dir.to_path_buf()).into());
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(parse_spec(&text)?)
}

fn run_id_of(run_dir: &Path) -> String {
    run_dir.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

/// Continues an interrupted run from its committed artifacts.
pub fn resume(run_dir: &Path, fault: Option<Fault>) -> Result<RunOutcome, EngineError> {
    let spec = run_spec(run_dir)?;
    let trace = load_trace(&spec)?;
    let mut store = Store::open(run_dir, spec.tracking.backend)?;
    store.fault = fault;
    let policy = resolve_policy(&spec);
    let loaded = load_state(run_dir, &run_id_of(run_dir), &policy)?;
    store.log_event("resumed")?;
    Engine::new(spec, store, trace, loaded.state, loaded.tries)?.drive()
}

/// Reads a run without taking its lock.
pub fn report(run_dir: &Path) -> Result<(Summary, Loaded, ResolvedPolicy), EngineError> {
    let spec = run_spec(run_dir)?;
    let policy = resolve_policy(&spec);
    let loaded = load_state(run_dir, &run_id_of(run_dir), &policy)?;
    if loaded.baseline.is_none() {
        return Err(StoreError::Empty(run_dir.to_path_buf()).into());
    }
    Ok((summarize(&spec.project.name, &loaded, &policy), loaded, policy))
}

fn load_trace(spec: &TaskSpec) -> Result<Option<Arc<ReplayTrace>>, EngineError> {
    Ok(match spec.drivers.replay_trace() {
        Some(p) => Some(Arc::new(ReplayTrace::load(p)?)),
        None => None,
    })
}

fn evaluator(spec: &TaskSpec) -> Option<Evaluator> {
    let timeout = spec.evaluation.eval_timeout_secs.map_or(DEFAULT_EVAL_TIMEOUT, Duration::from_secs);
    match &spec.drivers.evaluator {
        Some(DriverBinding::Builtin { name }) => return Some(Evaluator::Builtin(name.clone())),
        Some(DriverBinding::Command { argv, .. }) => {
            return Some(Evaluator::Command {
                train_cmd: spec.evaluation.train_cmd.clone(),
                eval_cmd: argv.join(" "),
                timeout,
            })
        }
        _ => {}
    }
    let eval_cmd = spec.evaluation.eval_cmd.clone().filter(|c| !c.trim().is_empty())?;
    Some(Evaluator::Command {
        train_cmd: spec.evaluation.train_cmd.clone(),
        eval_cmd,
        timeout,
    })
}

fn reset_dir(dir: &Path) -> Result<(), EngineError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), EngineError> {
    for e in WalkDir::new(from).sort_by_file_name() {
        let e = e.map_err(|e| EngineError::Io {
            path: from.to_path_buf(),
            source: io::Error::other(e),
        })?;
        let rel = e.path().strip_prefix(from).expect("walk stays below root");
        let dest = to.join(rel);
        if e.file_type().is_dir() {
            fs::create_dir_all(&dest).map_err(io_err(&dest))?;
        } else if e.file_type().is_file() {
            fs::copy(e.path(), &dest).map_err(io_err(&dest))?;
        }
    }
    Ok(())
}

fn scope_filter(scope: AccessScope) -> impl Fn(&str) -> bool {
    move |split| match scope {
        AccessScope::TrainOnly => split == TRAIN_SPLIT,
        AccessScope::EvalOnly => split != TRAIN_SPLIT,
        AccessScope::FullVisibleTests | AccessScope::Custom => true,
    }
}

struct Engine {
    spec: TaskSpec,
    policy: ResolvedPolicy,
    store: Store,
    harness: Harness,
    trace: Option<Arc<ReplayTrace>>,
    state: RunState,
    tries: Vec<TryArtifacts>,
    design: Option<String>,
}

/// What a finished try hands to the store and the state machine.
struct TryOutcome {
    report: Option<String>,
    investigation: Option<InvestigationRecord>,
    candidate: Option<CandidateRecord>,
    metrics: Option<MetricsArtifact>,
    review: Option<(crate::review::Stage, crate::review::DeltaRecord, crate::review::GuardReport)>,
    critic: Option<crate::drivers::CriticPayload>,
    verdict: Verdict,
    rationale: String,
}

impl TryOutcome {
    fn error(message: String) -> Self {
        TryOutcome {
            report: None,
            investigation: None,
            candidate: None,
            metrics: None,
            review: None,
            critic: None,
            verdict: Verdict::Reject(RejectReason::Error),
            rationale: message,
        }
    }
}

impl Engine {
    fn new(
        spec: TaskSpec,
        store: Store,
        trace: Option<Arc<ReplayTrace>>,
        state: RunState,
        tries: Vec<TryArtifacts>,
    ) -> Result<Engine, EngineError> {
        let policy = resolve_policy(&spec);
        let harness = Harness::new(
            evaluator(&spec),
            MetricsCache::new(store.cache_dir()),
            policy.deterministic,
            policy.bounded_metrics().into_iter().map(String::from).collect(),
        );
        let design_path = store.internal_file(DESIGN_FILE);
        let design = fs::read_to_string(design_path).ok();
        Ok(Engine {
            spec,
            policy,
            store,
            harness,
            trace,
            state,
            tries,
            design,
        })
    }

    fn driver(&self, role: Role) -> Option<Driver> {
        let enabled = match role {
            Role::SeedPlanner => self.spec.roles.seed_planner,
            Role::BaselineExecutor => self.spec.roles.baseline_executor,
            Role::Investigator => self.spec.roles.investigator,
            Role::Executor => self.spec.roles.executor,
            Role::Reviewer => {
                self.spec.roles.reviewer.enabled && self.spec.roles.reviewer.mode == ReviewerMode::LlmCritic
            }
        };
        if !enabled {
            return None;
        }
        Driver::from_binding(self.spec.drivers.for_role(role)?, self.trace.as_ref())
    }

    fn candidate_dir(&self, round: u32, tries: u32) -> PathBuf {
        let name = if round == 0 { BASELINE_CANDIDATE.to_string() } else { label(round, tries) };
        self.store.candidates_dir().join(name)
    }

    fn accepted_dir(&self) -> Option<PathBuf> {
        self.state.accepted.as_ref().map(|a| self.candidate_dir(a.round, a.tries))
    }

    fn split_path(&self, split: &Option<String>) -> Option<PathBuf> {
        split.as_deref().map(PathBuf::from)
    }

    fn request(&self, role: Role, round: u32, tries: u32) -> DriverRequest {
        let scope = self.policy.access_scope;
        let keep = scope_filter(scope);
        let train = self.split_path(&self.spec.data.train_split);
        let eval = self.split_path(&self.spec.data.eval_split);
        let visible = self
            .accepted_dir()
            .filter(|d| d.exists())
            .map(|d| visible_paths(&d, scope, train.as_deref(), eval.as_deref()))
            .unwrap_or_default();
        let history: Vec<HistoryItem> = self
            .tries
            .iter()
            .map(|t| {
                let mut h = history_item(t);
                h.metrics = h.metrics.map(|m| m.restricted_to(&keep));
                h
            })
            .collect();
        let prior_reports = self
            .tries
            .iter()
            .filter(|t| t.report.is_some())
            .map(|t| self.store.run_dir.join(report_file(&t.delta.label)))
            .collect();
        DriverRequest {
            protocol_version: PROTOCOL_VERSION,
            role,
            round,
            tries,
            goal: self.spec.run.goal.clone(),
            task_type: self.spec.run.task_type,
            accepted_summary: self.state.accepted.as_ref().map(|a| AcceptedSummary {
                metrics: a.metrics.restricted_to(&keep),
                digest: a.digest.clone(),
            }),
            visible_paths: visible,
            constraints: Constraints {
                admissible_changes: admissible_changes(self.spec.run.task_type).to_string(),
                max_rounds: self.policy.max_rounds,
                max_retries_per_round: self.policy.max_retries,
                samples: self.spec.investigation.samples,
                access_scope: scope,
            },
            prior_reports,
            history,
            candidate_dir: None,
            investigation: None,
            design: self.design.clone(),
            review: None,
        }
    }

    fn drive(mut self) -> Result<RunOutcome, EngineError> {
        if matches!(self.state.phase, Phase::Init | Phase::Phase1) {
            self.baseline()?;
        }
        while !self.state.is_done() {
            if self.state.tries_used_this_round == 0 {
                if let Some(reason) = should_terminate(&self.state, &self.policy) {
                    self.state = step(&self.state, Event::VerdictReady(Verdict::Terminate(reason)), &self.policy)?;
                    continue;
                }
            }
            self.run_try()?;
        }
        self.promote()?;
        self.finish()
    }

    fn materialize(&self, cand: &Path) -> Result<(), EngineError> {
        let source = self.spec.data.source.trim();
        if source.is_empty() {
            return Ok(());
        }
        let data = cand.join("data");
        if demos::materialize_builtin(source, &data).map_err(io_err(&data))? {
            return Ok(());
        }
        let p = Path::new(source);
        if p.is_dir() {
            copy_tree(p, &data)?;
        } else if p.is_file() {
            fs::create_dir_all(&data).map_err(io_err(&data))?;
            let dest = data.join(p.file_name().expect("a file has a name"));
            fs::copy(p, &dest).map_err(io_err(&dest))?;
        }
        // anything else is a free-form description of external data
        Ok(())
    }

    fn eval_context(&self, round: u32, tries: u32, cand: &Path, phase: &'static str) -> EvalContext {
        let l = if round == 0 { BASELINE_CANDIDATE.to_string() } else { label(round, tries) };
        EvalContext {
            run_dir: self.store.run_dir.clone(),
            round,
            tries,
            phase,
            candidate_dir: cand.to_path_buf(),
            metrics_out: self.store.internal.join("eval").join(&l).join("metrics.json"),
            log_stem: Some(self.store.logs_dir().join(&l)),
        }
    }

    fn evaluate(&mut self, round: u32, tries: u32, cand: &Path, digest: &str, phase: &'static str) -> Result<Evaluation, String> {
        if self.harness.evaluator.is_none() {
            if let Some(trace) = &self.trace {
                let m = trace
                    .metrics_for(round, tries)
                    .ok_or_else(|| format!("trace has no metrics for round {}", display_label(round, tries)))?
                    .clone();
                return self.harness.accept_supplied(digest, m).map_err(|e| e.to_string());
            }
        }
        let ctx = self.eval_context(round, tries, cand, phase);
        self.harness.evaluate_candidate(digest, &ctx).map_err(|e| e.to_string())
    }

    fn baseline(&mut self) -> Result<(), EngineError> {
        let start = now_utc();
        let cand = self.candidate_dir(0, 0);
        reset_dir(&cand)?;
        self.materialize(&cand)?;
        let mut description = None;
        if self.spec.phases.baseline_construction {
            if let Some(d) = self.driver(Role::SeedPlanner) {
                let req = self.request(Role::SeedPlanner, 0, 0);
                match d.invoke(&req).map_err(|e| EngineError::Baseline(e.to_string()))? {
                    DriverResponse::SeedPlanner(p) => {
                        let path = self.store.internal_file(DESIGN_FILE);
                        fs::write(&path, &p.design).map_err(io_err(&path))?;
                        self.design = Some(p.design);
                    }
                    other => return Err(EngineError::Baseline(format!("unexpected response {other:?}"))),
                }
            }
            if let Some(d) = self.driver(Role::BaselineExecutor) {
                let mut req = self.request(Role::BaselineExecutor, 0, 0);
                req.candidate_dir = Some(cand.clone());
                match d.invoke(&req).map_err(|e| EngineError::Baseline(e.to_string()))? {
                    DriverResponse::BaselineExecutor(p) => description = p.description,
                    other => return Err(EngineError::Baseline(format!("unexpected response {other:?}"))),
                }
            }
        } else {
            let project = self.store.run_dir.parent().expect("run dir has a parent").to_path_buf();
            for sub in PROMOTED {
                if project.join(sub).is_dir() {
                    copy_tree(&project.join(sub), &cand.join(sub))?;
                }
            }
        }
        let digest = snapshot_digest(&cand).map_err(io_err(&cand))?;
        let ev = self.evaluate(0, 0, &cand, &digest, "phase1").map_err(EngineError::Baseline)?;
        self.store.record_baseline(
            &ev.metrics,
            &BaselineRecord {
                digest: digest.clone(),
                description,
            },
            &start,
        )?;
        self.state = step(
            &self.state,
            Event::BaselineReady {
                digest,
                metrics: ev.metrics,
            },
            &self.policy,
        )?;
        Ok(())
    }

    fn run_try(&mut self) -> Result<(), EngineError> {
        let start = now_utc();
        let (round, tries) = (self.state.round, self.state.tries_used_this_round);
        let outcome = self.attempt(round, tries)?;
        let delta = DeltaFile {
            round,
            tries,
            label: label(round, tries),
            stage: outcome.review.as_ref().map(|r| r.0),
            investigation: outcome.investigation.clone(),
            candidate: outcome.candidate.clone(),
            delta: outcome.review.as_ref().map(|r| r.1.clone()),
            guards: outcome.review.as_ref().map(|r| r.2.clone()),
            critic: outcome.critic.clone(),
            verdict: outcome.verdict,
            rationale: outcome.rationale.clone(),
        };
        let artifacts = TryArtifacts {
            report: outcome.report,
            metrics: outcome.metrics,
            delta,
        };
        self.store.record_try(&artifacts, &start)?;
        let no_hypothesis = outcome.investigation.as_ref().is_some_and(|i| !i.has_hypothesis);
        if !no_hypothesis {
            self.state = step(&self.state, Event::VerdictReady(outcome.verdict), &self.policy)?;
        }
        self.tries.push(artifacts);
        Ok(())
    }

    /// Runs one try up to (not including) the verdict step. Driver and
    /// evaluation failures become `Reject(error)` outcomes.
    fn attempt(&mut self, round: u32, tries: u32) -> Result<TryOutcome, EngineError> {
        let Some(investigator) = self.driver(Role::Investigator) else {
            return Ok(TryOutcome::error("no investigator bound".into()));
        };
        let req = self.request(Role::Investigator, round, tries);
        let inv: InvestigatorPayload = match investigator.invoke(&req) {
            Ok(DriverResponse::Investigator(p)) => p,
            Ok(other) => return Ok(TryOutcome::error(format!("unexpected investigator response {other:?}"))),
            Err(e) => return Ok(TryOutcome::error(e.to_string())),
        };
        let record = InvestigationRecord {
            has_hypothesis: inv.has_hypothesis,
            hypothesis: inv.hypothesis.clone(),
            wants_retry_on_reject: inv.wants_retry_on_reject,
            proposal: inv.proposal.clone(),
        };
        let report = Some(render_report(round, tries, &inv));
        self.state = step(
            &self.state,
            Event::InvestigationReady {
                has_hypothesis: inv.has_hypothesis,
                wants_retry_on_reject: inv.wants_retry_on_reject,
            },
            &self.policy,
        )?;
        let mut out = TryOutcome {
            report,
            investigation: Some(record),
            ..TryOutcome::error(String::new())
        };
        if !inv.has_hypothesis {
            out.verdict = Verdict::Terminate(crate::review::TerminateReason::NoHypothesis);
            out.rationale = "investigator found no hypothesis".into();
            return Ok(out);
        }

        let cand = self.candidate_dir(round, tries);
        reset_dir(&cand)?;
        if let Some(acc) = self.accepted_dir() {
            copy_tree(&acc, &cand)?;
        }
        let Some(executor) = self.driver(Role::Executor) else {
            out.rationale = "no executor bound".into();
            return Ok(out);
        };
        let mut req = self.request(Role::Executor, round, tries);
        req.candidate_dir = Some(cand.clone());
        req.investigation = Some(inv.clone());
        let change = match executor.invoke(&req) {
            Ok(DriverResponse::Executor(p)) => p.change,
            Ok(other) => {
                out.rationale = format!("unexpected executor response {other:?}");
                return Ok(out);
            }
            Err(e) => {
                out.rationale = e.to_string();
                return Ok(out);
            }
        };
        let digest = snapshot_digest(&cand).map_err(io_err(&cand))?;
        out.candidate = Some(CandidateRecord {
            change,
            digest: digest.clone(),
        });
        self.state = step(&self.state, Event::CandidateReady { digest: digest.clone() }, &self.policy)?;

        let ev = match self.evaluate(round, tries, &cand, &digest, "phase2") {
            Ok(ev) => ev,
            Err(e) => {
                out.rationale = e;
                return Ok(out);
            }
        };
        out.metrics = Some(ev.metrics.clone());
        self.state = step(&self.state, Event::EvaluationReady { metrics: ev.metrics.clone() }, &self.policy)?;

        let accepted = self.state.accepted.clone().expect("phase II has an accepted state");
        let reviewed = current_stage(&accepted.metrics, &self.policy)
            .and_then(|stage| Ok((stage, compute_delta(&accepted.metrics, &ev.metrics, &self.policy)?)));
        let (stage, delta) = match reviewed {
            Ok(x) => x,
            Err(e) => {
                out.rationale = e.to_string();
                return Ok(out);
            }
        };
        let examples = self
            .spec
            .data
            .eval_split
            .as_deref()
            .filter(|_| self.policy.has_guard(crate::spec::GuardName::Leakage))
            .and_then(|s| read_examples(&cand.join(s)).ok());
        let texts = collect_texts(&cand, &["data"]);
        let guards = check_guards(
            &ev.metrics,
            &self.policy,
            &GuardContext {
                stage,
                accepted_digest: &accepted.digest,
                candidate_digest: &digest,
                cached: ev.previously_cached.as_ref(),
                eval_examples: examples.as_deref(),
                artifact_texts: &texts,
            },
        );
        let verdict = decide_verdict(&delta, &guards, stage, &self.policy);
        out.rationale = rationale(&delta, &guards, stage, &verdict);
        out.verdict = verdict;
        if let Some(critic) = self.driver(Role::Reviewer) {
            let mut req = self.request(Role::Reviewer, round, tries);
            req.candidate_dir = Some(cand.clone());
            req.investigation = Some(inv);
            req.review = Some(ReviewContext {
                stage,
                delta: Some(delta.clone()),
                guards: guards.clone(),
                verdict,
            });
            match critic.invoke(&req) {
                Ok(DriverResponse::Reviewer(p)) => out.critic = Some(p),
                Ok(other) => self.store.log_event(&format!("critic: unexpected response {other:?}"))?,
                Err(e) => self.store.log_event(&format!("critic failed: {e}"))?,
            }
        }
        out.review = Some((stage, delta, guards));
        Ok(out)
    }

    fn promote(&self) -> Result<(), EngineError> {
        let Some(acc) = self.accepted_dir() else { return Ok(()) };
        let project = self.store.run_dir.parent().expect("run dir has a parent");
        for sub in PROMOTED {
            let from = acc.join(sub);
            if from.is_dir() {
                let to = project.join(sub);
                reset_dir(&to)?;
                copy_tree(&from, &to)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<RunOutcome, EngineError> {
        let loaded = load_state(&self.store.run_dir, &self.state.run_id, &self.policy)?;
        if loaded.state != self.state {
            return Err(StoreError::Corrupt {
                path: self.store.run_dir.clone(),
                message: "reloaded state differs from the in-memory state".into(),
            }
            .into());
        }
        let summary = summarize(&self.spec.project.name, &loaded, &self.policy);
        let summary_path = self.store.write_summary_file(&render_summary(&summary))?;
        self.store.log_event(&format!(
            "run finished: {}",
            loaded.state.termination.map_or("-".to_string(), |t| t.reason.to_string())
        ))?;
        Ok(RunOutcome {
            run_dir: self.store.run_dir.clone(),
            summary_path,
            summary,
            loaded,
            policy: self.policy,
        })
    }
}

fn render_report(round: u32, tries: u32, inv: &InvestigatorPayload) -> String {
    let mut s = format!("# Investigation, round {}\n\n{}\n", display_label(round, tries), inv.report.trim_end());
    s.push_str("\n## Hypothesis\n\n");
    match &inv.hypothesis {
        Some(h) if inv.has_hypothesis => s.push_str(h.trim_end()),
        _ => s.push_str("none"),
    }
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::review::TerminateReason;
    use crate::spec::tests::RULE_SPEC;

    fn run_rules(ws: &Path, run_id: &str) -> RunOutcome {
        let spec = parse_spec(RULE_SPEC).unwrap();
        run(ws, spec, RULE_SPEC, &RunOptions { run_id: Some(run_id.into()), ..Default::default() }).unwrap()
    }

    #[test]
    fn rule_demo_improves_eval_accuracy() {
        let ws = tempfile::tempdir().unwrap();
        let out = run_rules(ws.path(), "r1");
        let acc = out.loaded.state.accepted.as_ref().unwrap();
        let eval = acc.metrics.split_value("eval", "accuracy").unwrap();
        assert!(eval >= 0.9778, "{eval}");
        assert!(out.summary_path.exists());
        assert!(ws.path().join("projects/iris_rules_run.yaml").exists());
        assert!(ws.path().join("projects/iris_rules/rules/rules.json").exists());
        assert!(out.loaded.state.termination.is_some());
    }

    #[test]
    fn baseline_only_run() {
        let ws = tempfile::tempdir().unwrap();
        let mut spec = parse_spec(RULE_SPEC).unwrap();
        spec.phases.multi_round_optimization = false;
        let out = run(ws.path(), spec, RULE_SPEC, &RunOptions::default()).unwrap();
        assert_eq!(out.summary.rows.len(), 1);
        assert_eq!(out.loaded.state.termination.unwrap().reason, TerminateReason::BudgetExhausted);
    }

    #[test]
    fn git_is_rejected() {
        let ws = tempfile::tempdir().unwrap();
        let mut spec = parse_spec(RULE_SPEC).unwrap();
        spec.git.enabled = true;
        assert!(matches!(run(ws.path(), spec, RULE_SPEC, &RunOptions::default()), Err(EngineError::Unsupported(_))));
    }

    #[test]
    fn resume_of_finished_run_is_a_no_op() {
        let ws = tempfile::tempdir().unwrap();
        let out = run_rules(ws.path(), "r1");
        let before = fs::read(&out.summary_path).unwrap();
        let again = resume(&out.run_dir, None).unwrap();
        assert_eq!(fs::read(&again.summary_path).unwrap(), before);
        assert_eq!(again.loaded.state, out.loaded.state);
    }
}
