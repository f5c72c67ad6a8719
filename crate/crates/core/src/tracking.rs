//! Run directory layout, atomic per-try commits, state reconstruction and
//! the run summary.
//!
//! ```text
//! <workspace>/projects/<slug>_run.yaml
//! <workspace>/projects/<slug>/{src,tests,rules}/
//! <workspace>/projects/<slug>/<run_id>/        canonical artifacts only
//! <workspace>/projects/<slug>/.epoch/<run_id>/ lock, cache, candidates, logs
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::drivers::{CriticPayload, HistoryItem};
use crate::metrics::{canonical_json, parse_metrics, MetricsArtifact};
use crate::policy::ResolvedPolicy;
use crate::protocol::{should_terminate, step, Event, HistoryEntry, IllegalEvent, Phase, RunState, Termination};
use crate::review::{DeltaRecord, GuardReport, RejectReason, Stage, TerminateReason, Verdict};
use crate::spec::TrackingBackend;

pub const BASELINE_METRICS: &str = "baseline_metrics.json";
pub const RUN_SUMMARY: &str = "run_summary.md";
pub const INTERNAL_DIR: &str = ".epoch";
const BASELINE_SIDECAR: &str = "baseline.json";
const TIMESTAMPS: &str = "timestamps.jsonl";
const EVENTS_LOG: &str = "events.log";
const LOCK_FILE: &str = "lock";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("tracking backend `{0}` is not supported")]
    UnsupportedBackend(String),
    #[error("corrupt artifact {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("no run artifacts in {0}")]
    Empty(PathBuf),
    #[error("interrupted at commit {0}")]
    Interrupted(usize),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Rendered label of a try: the baseline is round 1, retries get `r<k>`.
pub fn label(round: u32, tries: u32) -> String {
    if tries == 0 {
        format!("{}", round + 1)
    } else {
        format!("{}r{tries}", round + 1)
    }
}

/// Inverse of [`label`].
pub fn parse_label(s: &str) -> Option<(u32, u32)> {
    let (r, t) = match s.split_once('r') {
        Some((r, t)) => (r, t.parse::<u32>().ok().filter(|t| *t > 0)?),
        None => (s, 0),
    };
    if r.starts_with('0') || r.starts_with('+') {
        return None;
    }
    let rendered: u32 = r.parse().ok()?;
    Some((rendered.checked_sub(1)?, t))
}

/// Summary style: `3R` for the first retry, `3R2` for later ones.
pub fn display_label(round: u32, tries: u32) -> String {
    match tries {
        0 => format!("{}", round + 1),
        1 => format!("{}R", round + 1),
        k => format!("{}R{k}", round + 1),
    }
}

pub fn report_file(l: &str) -> String {
    format!("investigation_report_round_{l}.md")
}

pub fn metrics_file(l: &str) -> String {
    format!("proposed_metrics_round_{l}.json")
}

pub fn delta_file(l: &str) -> String {
    format!("delta_round_{l}.json")
}

/// Which documented pattern a file name in `<run_id>/` matches, if any.
pub fn classify(name: &str) -> Option<ArtifactKind> {
    if name == BASELINE_METRICS {
        return Some(ArtifactKind::Baseline);
    }
    if name == RUN_SUMMARY {
        return Some(ArtifactKind::Summary);
    }
    let try_label = |prefix: &str, suffix: &str| {
        name.strip_prefix(prefix)
            .and_then(|s| s.strip_suffix(suffix))
            .and_then(|l| parse_label(l).filter(|&(r, _)| r > 0))
    };
    if let Some((r, t)) = try_label("investigation_report_round_", ".md") {
        return Some(ArtifactKind::Report(r, t));
    }
    if let Some((r, t)) = try_label("proposed_metrics_round_", ".json") {
        return Some(ArtifactKind::Metrics(r, t));
    }
    if let Some((r, t)) = try_label("delta_round_", ".json") {
        return Some(ArtifactKind::Delta(r, t));
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Baseline,
    Summary,
    Report(u32, u32),
    Metrics(u32, u32),
    Delta(u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvestigationRecord {
    pub has_hypothesis: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    pub wants_retry_on_reject: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub change: String,
    pub digest: String,
}

/// Contents of `delta_round_<N>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaFile {
    pub round: u32,
    #[serde(rename = "try")]
    pub tries: u32,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub investigation: Option<InvestigationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<CandidateRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guards: Option<GuardReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticPayload>,
    pub verdict: Verdict,
    pub rationale: String,
}

/// Everything one try leaves on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TryArtifacts {
    pub report: Option<String>,
    pub metrics: Option<MetricsArtifact>,
    pub delta: DeltaFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineRecord {
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Serialize)]
struct Stamp<'a> {
    artifact: &'a str,
    start: &'a str,
    end: String,
}

/// Engine-internal directory for a run directory.
pub fn internal_dir(run_dir: &Path) -> PathBuf {
    let name = run_dir.file_name().unwrap_or_default();
    run_dir
        .parent()
        .unwrap_or(Path::new("."))
        .join(INTERNAL_DIR)
        .join(name)
}

/// Where [`Store::create`] puts things for a project.
pub fn project_dir(workspace: &Path, slug: &str) -> PathBuf {
    workspace.join("projects").join(slug)
}

pub fn spec_copy_path(workspace: &Path, slug: &str) -> PathBuf {
    workspace.join("projects").join(format!("{slug}_run.yaml"))
}

pub fn new_run_id() -> String {
    let suffix: u16 = rand::random();
    format!("{}-{suffix:04x}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

pub fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Simulated crash points for resume testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    /// 1-based commit number at which to stop.
    pub commit: usize,
    /// Stop after the non-marker files were renamed but before the marker.
    pub mid_commit: bool,
}

#[derive(Debug)]
pub struct Store {
    pub run_dir: PathBuf,
    pub internal: PathBuf,
    pub backend: TrackingBackend,
    pub commits: usize,
    pub fault: Option<Fault>,
    _lock: File,
}

fn check_backend(backend: TrackingBackend) -> Result<(), StoreError> {
    match backend {
        TrackingBackend::LocalLogs | TrackingBackend::StructuredFiles => Ok(()),
        TrackingBackend::GithubPrs => Err(StoreError::UnsupportedBackend("github_prs".into())),
        TrackingBackend::Custom => Err(StoreError::UnsupportedBackend("custom".into())),
    }
}

impl Store {
    /// Creates the project skeleton and an empty run directory.
    pub fn create(workspace: &Path, slug: &str, run_id: &str, backend: TrackingBackend) -> Result<Store, StoreError> {
        check_backend(backend)?;
        let project = project_dir(workspace, slug);
        for sub in ["src", "tests", "rules"] {
            let p = project.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let run_dir = project.join(run_id);
        fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
        Store::open(&run_dir, backend)
    }

    /// Opens an existing run directory: takes the lock, discards uncommitted
    /// staging files and orphaned round files.
    pub fn open(run_dir: &Path, backend: TrackingBackend) -> Result<Store, StoreError> {
        check_backend(backend)?;
        if !run_dir.is_dir() {
            return Err(StoreError::Empty(run_dir.to_path_buf()));
        }
        let internal = internal_dir(run_dir);
        fs::create_dir_all(&internal).map_err(io_err(&internal))?;
        let lock_path = internal.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(run_dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => return Err(io_err(&lock_path)(e)),
        }
        let store = Store {
            run_dir: run_dir.to_path_buf(),
            internal,
            backend,
            commits: 0,
            fault: None,
            _lock: lock,
        };
        store.discard_uncommitted()?;
        Ok(store)
    }

    fn discard_uncommitted(&self) -> Result<(), StoreError> {
        let staging = self.internal.join("staging");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        let names = self.artifact_names()?;
        let committed: Vec<(u32, u32)> = names
            .iter()
            .filter_map(|n| match classify(n) {
                Some(ArtifactKind::Delta(r, t)) => Some((r, t)),
                _ => None,
            })
            .collect();
        for n in &names {
            let orphan = match classify(n) {
                Some(ArtifactKind::Report(r, t) | ArtifactKind::Metrics(r, t)) => !committed.contains(&(r, t)),
                _ => false,
            };
            if orphan {
                let p = self.run_dir.join(n);
                fs::remove_file(&p).map_err(io_err(&p))?;
            }
        }
        Ok(())
    }

    /// Names of the regular files directly inside the run directory, sorted.
    pub fn artifact_names(&self) -> Result<Vec<String>, StoreError> {
        let mut names = Vec::new();
        for e in fs::read_dir(&self.run_dir).map_err(io_err(&self.run_dir))? {
            let e = e.map_err(io_err(&self.run_dir))?;
            names.push(e.file_name().to_string_lossy().into_owned());
        }
        names.sort();
        Ok(names)
    }

    pub fn candidates_dir(&self) -> PathBuf {
        self.internal.join("candidates")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.internal.join("cache")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.internal.join("logs")
    }

    pub fn internal_file(&self, name: &str) -> PathBuf {
        self.internal.join(name)
    }

    /// Appends to the event log (local_logs backend only).
    pub fn log_event(&self, line: &str) -> Result<(), StoreError> {
        if self.backend != TrackingBackend::LocalLogs {
            return Ok(());
        }
        let p = self.internal.join(EVENTS_LOG);
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
        writeln!(f, "{} {line}", now_utc()).map_err(io_err(&p))
    }

    fn stamp(&self, artifact: &str, start: &str) -> Result<(), StoreError> {
        let p = self.internal.join(TIMESTAMPS);
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(io_err(&p))?;
        let line = serde_json::to_string(&Stamp {
            artifact,
            start,
            end: now_utc(),
        })
        .expect("stamp serializes");
        writeln!(f, "{line}").map_err(io_err(&p))
    }

    /// Writes `files` to staging, then renames them into the run directory
    /// in order. The last file is the commit marker.
    fn commit(&mut self, files: &[(String, Vec<u8>)]) -> Result<(), StoreError> {
        let staging = self.internal.join("staging");
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        for (name, bytes) in files {
            let p = staging.join(name);
            let mut f = File::create(&p).map_err(io_err(&p))?;
            f.write_all(bytes).map_err(io_err(&p))?;
            f.sync_all().map_err(io_err(&p))?;
        }
        let n = self.commits + 1;
        let (marker, rest) = files.split_last().expect("a commit has at least one file");
        for (name, _) in rest {
            let to = self.run_dir.join(name);
            fs::rename(staging.join(name), &to).map_err(io_err(&to))?;
        }
        if self.fault == Some(Fault { commit: n, mid_commit: true }) {
            return Err(StoreError::Interrupted(n));
        }
        let to = self.run_dir.join(&marker.0);
        fs::rename(staging.join(&marker.0), &to).map_err(io_err(&to))?;
        self.commits = n;
        if self.fault == Some(Fault { commit: n, mid_commit: false }) {
            return Err(StoreError::Interrupted(n));
        }
        Ok(())
    }

    pub fn record_baseline(
        &mut self,
        metrics: &MetricsArtifact,
        record: &BaselineRecord,
        start: &str,
    ) -> Result<(), StoreError> {
        let side = self.internal.join(BASELINE_SIDECAR);
        fs::write(&side, canonical_json(record)).map_err(io_err(&side))?;
        self.commit(&[(BASELINE_METRICS.to_string(), canonical_json(metrics))])?;
        self.stamp(BASELINE_METRICS, start)?;
        self.log_event(&format!("commit {BASELINE_METRICS}"))
    }

    pub fn record_try(&mut self, a: &TryArtifacts, start: &str) -> Result<(), StoreError> {
        let l = &a.delta.label;
        let mut files = Vec::new();
        if let Some(r) = &a.report {
            files.push((report_file(l), r.as_bytes().to_vec()));
        }
        if let Some(m) = &a.metrics {
            files.push((metrics_file(l), canonical_json(m)));
        }
        files.push((delta_file(l), canonical_json(&a.delta)));
        self.commit(&files)?;
        self.stamp(&delta_file(l), start)?;
        self.log_event(&format!("commit {} verdict={}", delta_file(l), a.delta.verdict))
    }

    pub fn write_summary_file(&self, text: &str) -> Result<PathBuf, StoreError> {
        let p = self.run_dir.join(RUN_SUMMARY);
        let tmp = self.internal.join("summary.tmp");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &p).map_err(io_err(&p))?;
        Ok(p)
    }
}

/// A run reconstructed from its artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub state: RunState,
    pub baseline: Option<(MetricsArtifact, BaselineRecord)>,
    pub tries: Vec<TryArtifacts>,
}

impl Loaded {
    /// Prior tries in driver-facing form.
    pub fn history_items(&self) -> Vec<HistoryItem> {
        self.tries.iter().map(history_item).collect()
    }
}

pub fn history_item(t: &TryArtifacts) -> HistoryItem {
    let inv = t.delta.investigation.as_ref();
    HistoryItem {
        round: t.delta.round,
        tries: t.delta.tries,
        hypothesis: inv.and_then(|i| i.hypothesis.clone()),
        proposal: inv.and_then(|i| i.proposal.clone()),
        change: t.delta.candidate.as_ref().map(|c| c.change.clone()),
        metrics: t.metrics.clone(),
        verdict: t.delta.verdict,
    }
}

fn corrupt(path: &Path, message: impl Into<String>) -> StoreError {
    StoreError::Corrupt {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_canonical<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    let v: T = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| corrupt(path, format!("at `{}`: {}", e.path(), e.inner())))?;
    de.end().map_err(|e| corrupt(path, e.to_string()))?;
    Ok(v)
}

fn read_metrics_artifact(path: &Path) -> Result<MetricsArtifact, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_metrics(&bytes).map_err(|e| corrupt(path, e.to_string()))
}

/// Rebuilds the run state by replaying the committed artifacts through the
/// protocol state machine.
pub fn load_state(run_dir: &Path, run_id: &str, policy: &ResolvedPolicy) -> Result<Loaded, StoreError> {
    let internal = internal_dir(run_dir);
    let mut state = RunState::new(run_id);
    let base_path = run_dir.join(BASELINE_METRICS);
    if !base_path.exists() {
        return Ok(Loaded {
            state,
            baseline: None,
            tries: Vec::new(),
        });
    }
    let base_metrics = read_metrics_artifact(&base_path)?;
    let side_path = internal.join(BASELINE_SIDECAR);
    let record: BaselineRecord = read_canonical(&side_path)?;
    let illegal = |path: &Path, e: IllegalEvent| corrupt(path, e.to_string());
    state = step(
        &state,
        Event::BaselineReady {
            digest: record.digest.clone(),
            metrics: base_metrics.clone(),
        },
        policy,
    )
    .map_err(|e| illegal(&base_path, e))?;

    let mut keys: Vec<(u32, u32)> = Vec::new();
    for e in fs::read_dir(run_dir).map_err(io_err(run_dir))? {
        let e = e.map_err(io_err(run_dir))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(ArtifactKind::Delta(r, t)) = classify(&name) {
            keys.push((r, t));
        }
    }
    keys.sort_unstable();

    let mut tries = Vec::new();
    for (round, t) in keys {
        let l = label(round, t);
        let path = run_dir.join(delta_file(&l));
        if state.phase == Phase::Phase2 && state.tries_used_this_round == 0 {
            if let Some(reason) = should_terminate(&state, policy) {
                state = step(&state, Event::VerdictReady(Verdict::Terminate(reason)), policy)
                    .map_err(|e| illegal(&path, e))?;
            }
        }
        if state.is_done() {
            return Err(corrupt(&path, "artifact recorded after the run terminated"));
        }
        if (state.round, state.tries_used_this_round) != (round, t) {
            return Err(corrupt(
                &path,
                format!("expected round {} next", label(state.round, state.tries_used_this_round)),
            ));
        }
        let delta: DeltaFile = read_canonical(&path)?;
        if (delta.round, delta.tries) != (round, t) || delta.label != l {
            return Err(corrupt(&path, "round/try fields disagree with the file name"));
        }
        let report_path = run_dir.join(report_file(&l));
        let report = match fs::read_to_string(&report_path) {
            Ok(s) => Some(s),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(io_err(&report_path)(e)),
        };
        let metrics_path = run_dir.join(metrics_file(&l));
        let metrics = if metrics_path.exists() {
            Some(read_metrics_artifact(&metrics_path)?)
        } else {
            None
        };

        let before = state.history.len();
        let feed = |s: &RunState, ev: Event| step(s, ev, policy).map_err(|e| illegal(&path, e));
        if let Some(inv) = &delta.investigation {
            state = feed(
                &state,
                Event::InvestigationReady {
                    has_hypothesis: inv.has_hypothesis,
                    wants_retry_on_reject: inv.wants_retry_on_reject,
                },
            )?;
        }
        if let Some(c) = &delta.candidate {
            state = feed(&state, Event::CandidateReady { digest: c.digest.clone() })?;
        }
        if let Some(m) = &metrics {
            state = feed(&state, Event::EvaluationReady { metrics: m.clone() })?;
        }
        let no_hypothesis = delta.investigation.as_ref().is_some_and(|i| !i.has_hypothesis);
        if !no_hypothesis {
            state = feed(&state, Event::VerdictReady(delta.verdict))?;
        }
        let expected = HistoryEntry {
            round,
            tries: t,
            verdict: delta.verdict,
        };
        if !state.history[before..].contains(&expected) {
            return Err(corrupt(&path, format!("recorded verdict {} is inconsistent with the run", delta.verdict)));
        }
        tries.push(TryArtifacts { report, metrics, delta });
    }
    if state.phase == Phase::Phase2 && state.tries_used_this_round == 0 {
        if let Some(reason) = should_terminate(&state, policy) {
            state = step(&state, Event::VerdictReady(Verdict::Terminate(reason)), policy)
                .map_err(|e| corrupt(run_dir, e.to_string()))?;
        }
    }
    Ok(Loaded {
        state,
        baseline: Some((base_metrics, record)),
        tries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub round: String,
    pub change: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsArtifact>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub project: String,
    pub metric: String,
    pub rows: Vec<SummaryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_round: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_value: Option<f64>,
}

pub fn summarize(project: &str, loaded: &Loaded, policy: &ResolvedPolicy) -> Summary {
    let mut rows = Vec::new();
    if let Some((m, rec)) = &loaded.baseline {
        rows.push(SummaryRow {
            round: display_label(0, 0),
            change: rec.description.clone().unwrap_or_else(|| "baseline".into()),
            metrics: Some(m.clone()),
            verdict: Verdict::BaselineAccepted,
        });
    }
    for t in &loaded.tries {
        let d = &t.delta;
        let change = d
            .candidate
            .as_ref()
            .map(|c| c.change.clone())
            .or_else(|| d.investigation.as_ref().and_then(|i| i.hypothesis.clone()))
            .unwrap_or_else(|| "-".into());
        rows.push(SummaryRow {
            round: display_label(d.round, d.tries),
            change,
            metrics: t.metrics.clone(),
            verdict: d.verdict,
        });
    }
    let accepted = loaded.state.accepted.as_ref();
    Summary {
        project: project.to_string(),
        metric: policy.metric.clone(),
        rows,
        termination: loaded.state.termination,
        final_round: accepted.map(|a| display_label(a.round, a.tries)),
        final_value: accepted.and_then(|a| policy.primary_value(&a.metrics)),
    }
}

fn num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// Compact metric rendering for summary tables.
pub fn render_metrics(m: &MetricsArtifact, metric: &str) -> String {
    let mut parts = Vec::new();
    for (split, values) in &m.splits {
        if let Some(v) = values.get(metric) {
            parts.push(format!("{split} {v:.4}"));
        }
    }
    if let Some(t) = m.tests {
        parts.push(format!("tests {}/{}", t.passed, t.total));
    }
    if let Some(timings) = &m.timings_ms {
        for (k, v) in timings {
            parts.push(format!("{k} {} ms", num(*v)));
        }
    }
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(", ")
    }
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

pub fn render_summary(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run summary: {}\n", s.project);
    out.push_str("| Round | Key change | Metrics | Verdict |\n");
    out.push_str("|---|---|---|---|\n");
    for r in &s.rows {
        let metrics = r.metrics.as_ref().map_or("-".to_string(), |m| render_metrics(m, &s.metric));
        let _ = writeln!(out, "| {} | {} | {} | {} |", r.round, cell(&r.change), cell(&metrics), r.verdict);
    }
    out.push('\n');
    match &s.termination {
        Some(t) => {
            let _ = writeln!(out, "Terminated: {} (after round {}).", t.reason, display_label(t.round, 0));
        }
        None => out.push_str("Run in progress.\n"),
    }
    if let (Some(r), Some(v)) = (&s.final_round, s.final_value) {
        let _ = writeln!(out, "Final accepted state: round {r}, {} = {}.", s.metric, num(v));
    }
    out
}

/// One line per history entry:
/// `round=<N>[R<k>] verdict=<label> reason=<reason|-> primary=<value|->`.
pub fn verdict_lines(loaded: &Loaded, policy: &ResolvedPolicy) -> Vec<String> {
    let mut metrics: BTreeMap<(u32, u32), &MetricsArtifact> = BTreeMap::new();
    if let Some((m, _)) = &loaded.baseline {
        metrics.insert((0, 0), m);
    }
    for t in &loaded.tries {
        if let Some(m) = &t.metrics {
            metrics.insert((t.delta.round, t.delta.tries), m);
        }
    }
    loaded
        .state
        .history
        .iter()
        .map(|h| {
            let primary = match h.verdict {
                Verdict::Terminate(TerminateReason::BudgetExhausted | TerminateReason::Saturated) => None,
                _ => metrics.get(&(h.round, h.tries)).and_then(|m| policy.primary_value(m)),
            };
            format!(
                "round={}{} verdict={} reason={} primary={}",
                h.round + 1,
                match h.tries {
                    0 => String::new(),
                    k => format!("R{k}"),
                },
                h.verdict.label(),
                h.verdict.reason().unwrap_or_else(|| "-".into()),
                primary.map_or("-".into(), |v| format!("{v}")),
            )
        })
        .collect()
}

/// Convenience for error tries.
pub fn error_verdict() -> Verdict {
    Verdict::Reject(RejectReason::Error)
}
