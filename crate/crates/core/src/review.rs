//! Metric-driven review: deltas, guards, staged objectives and verdicts.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::metrics::MetricsArtifact;
use crate::policy::{Guard, ResolvedPolicy};
use crate::spec::{DeltaMode, Direction, GuardName};

#[derive(Debug, Error, PartialEq)]
pub enum ReviewError {
    #[error("primary metric `{metric}` missing from the {which} artifact")]
    MissingMetric { metric: String, which: &'static str },
    #[error("relative delta undefined: accepted value of `{0}` is zero")]
    ZeroBaseline(String),
    #[error("code improvement artifact has no `tests` block")]
    MissingTests,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Correctness,
    Performance,
    Single,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Correctness => "correctness",
            Stage::Performance => "performance",
            Stage::Single => "single",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectnessDelta {
    pub accepted_ratio: f64,
    pub candidate_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaRecord {
    pub metric: String,
    pub accepted_value: f64,
    pub candidate_value: f64,
    pub mode: DeltaMode,
    pub direction: Direction,
    pub improvement: f64,
    pub min_delta: f64,
    pub meets_min_delta: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correctness: Option<CorrectnessDelta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardOutcome {
    pub guard: GuardName,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardReport {
    pub outcomes: Vec<GuardOutcome>,
    pub overall_pass: bool,
}

impl GuardReport {
    pub fn first_failure(&self) -> Option<GuardName> {
        self.outcomes.iter().find(|o| !o.pass).map(|o| o.guard)
    }

    pub fn outcome(&self, name: GuardName) -> Option<&GuardOutcome> {
        self.outcomes.iter().find(|o| o.guard == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RejectReason {
    Regression,
    InsufficientGain,
    GuardViolation(GuardName),
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TerminateReason {
    NoHypothesis,
    BudgetExhausted,
    Saturated,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VerdictRepr", into = "VerdictRepr")]
pub enum Verdict {
    BaselineAccepted,
    Accept,
    Reject(RejectReason),
    Terminate(TerminateReason),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Regression => f.write_str("regression"),
            RejectReason::InsufficientGain => f.write_str("insufficient_gain"),
            RejectReason::GuardViolation(g) => write!(f, "guard_violation:{g}"),
            RejectReason::Error => f.write_str("error"),
        }
    }
}

impl FromStr for RejectReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "regression" => RejectReason::Regression,
            "insufficient_gain" => RejectReason::InsufficientGain,
            "error" => RejectReason::Error,
            other => {
                let guard = other
                    .strip_prefix("guard_violation:")
                    .and_then(GuardName::parse)
                    .ok_or_else(|| format!("unknown reject reason `{other}`"))?;
                RejectReason::GuardViolation(guard)
            }
        })
    }
}

impl fmt::Display for TerminateReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminateReason::NoHypothesis => "no_hypothesis",
            TerminateReason::BudgetExhausted => "budget_exhausted",
            TerminateReason::Saturated => "saturated",
            TerminateReason::Error => "error",
        })
    }
}

impl FromStr for TerminateReason {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "no_hypothesis" => TerminateReason::NoHypothesis,
            "budget_exhausted" => TerminateReason::BudgetExhausted,
            "saturated" => TerminateReason::Saturated,
            "error" => TerminateReason::Error,
            other => return Err(format!("unknown terminate reason `{other}`")),
        })
    }
}

impl TryFrom<String> for RejectReason {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<RejectReason> for String {
    fn from(r: RejectReason) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for TerminateReason {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TerminateReason> for String {
    fn from(r: TerminateReason) -> String {
        r.to_string()
    }
}

impl Verdict {
    /// Short name used in verdict lines and summaries.
    pub fn label(&self) -> &'static str {
        match self {
            Verdict::BaselineAccepted => "Baseline",
            Verdict::Accept => "Accept",
            Verdict::Reject(_) => "Reject",
            Verdict::Terminate(_) => "Terminate",
        }
    }

    pub fn reason(&self) -> Option<String> {
        match self {
            Verdict::Reject(r) => Some(r.to_string()),
            Verdict::Terminate(r) => Some(r.to_string()),
            _ => None,
        }
    }

    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.reason() {
            Some(r) => write!(f, "{}({r})", self.label()),
            None => f.write_str(self.label()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerdictRepr {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

impl From<Verdict> for VerdictRepr {
    fn from(v: Verdict) -> Self {
        let kind = match v {
            Verdict::BaselineAccepted => "baseline_accepted",
            Verdict::Accept => "accept",
            Verdict::Reject(_) => "reject",
            Verdict::Terminate(_) => "terminate",
        };
        VerdictRepr {
            kind: kind.into(),
            reason: v.reason(),
        }
    }
}

impl TryFrom<VerdictRepr> for Verdict {
    type Error = String;
    fn try_from(r: VerdictRepr) -> Result<Self, String> {
        match (r.kind.as_str(), r.reason) {
            ("baseline_accepted", None) => Ok(Verdict::BaselineAccepted),
            ("accept", None) => Ok(Verdict::Accept),
            ("reject", Some(reason)) => Ok(Verdict::Reject(reason.parse()?)),
            ("terminate", Some(reason)) => Ok(Verdict::Terminate(reason.parse()?)),
            (kind, reason) => Err(format!(
                "invalid verdict kind `{kind}` with reason {reason:?}"
            )),
        }
    }
}

pub fn compute_delta(
    accepted: &MetricsArtifact,
    candidate: &MetricsArtifact,
    policy: &ResolvedPolicy,
) -> Result<DeltaRecord, ReviewError> {
    let missing = |which| ReviewError::MissingMetric {
        metric: policy.metric.clone(),
        which,
    };
    let a = policy.primary_value(accepted).ok_or_else(|| missing("accepted"))?;
    let c = policy.primary_value(candidate).ok_or_else(|| missing("candidate"))?;
    let gain = match policy.direction {
        Direction::Maximize => c - a,
        Direction::Minimize => a - c,
    };
    let improvement = match policy.delta_mode {
        DeltaMode::Absolute => gain,
        DeltaMode::Relative => {
            if a == 0.0 {
                return Err(ReviewError::ZeroBaseline(policy.metric.clone()));
            }
            gain / a.abs()
        }
    };
    let correctness = match (policy.staged, accepted.tests, candidate.tests) {
        (true, Some(at), Some(ct)) => Some(CorrectnessDelta {
            accepted_ratio: at.ratio(),
            candidate_ratio: ct.ratio(),
        }),
        _ => None,
    };
    Ok(DeltaRecord {
        metric: policy.metric.clone(),
        accepted_value: a,
        candidate_value: c,
        mode: policy.delta_mode,
        direction: policy.direction,
        improvement,
        min_delta: policy.min_delta,
        meets_min_delta: improvement >= policy.min_delta,
        correctness,
    })
}

pub fn current_stage(accepted: &MetricsArtifact, policy: &ResolvedPolicy) -> Result<Stage, ReviewError> {
    if !policy.staged {
        return Ok(Stage::Single);
    }
    let tests = accepted.tests.ok_or(ReviewError::MissingTests)?;
    Ok(if tests.all_pass() {
        Stage::Performance
    } else {
        Stage::Correctness
    })
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Minimum normalized length for substring matching; shorter examples only
/// match an artifact text that equals them exactly.
pub const LEAK_MIN_CHARS: usize = 20;

/// Returns the indices of eval examples that occur in any artifact text.
pub fn leakage_scan(eval_examples: &[String], artifact_texts: &[String]) -> Vec<usize> {
    let artifacts: Vec<String> = artifact_texts.iter().map(|t| normalize(t)).collect();
    eval_examples
        .iter()
        .enumerate()
        .filter_map(|(i, ex)| {
            let ex = normalize(ex);
            if ex.is_empty() {
                return None;
            }
            let hit = if ex.chars().count() >= LEAK_MIN_CHARS {
                artifacts.iter().any(|a| a.contains(&ex))
            } else {
                artifacts.iter().any(|a| *a == ex)
            };
            hit.then_some(i)
        })
        .collect()
}

/// Reads eval examples from a split file: one example per non-empty line,
/// with a trailing tab-separated label dropped.
pub fn read_examples(path: &Path) -> std::io::Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| match l.rsplit_once('\t') {
            Some((example, _label)) => example,
            None => l,
        })
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Every UTF-8 file under `dir` except those under the `skip` prefixes
/// (relative to `dir`). Files are visited in sorted order.
pub fn collect_texts(dir: &Path, skip: &[&str]) -> Vec<String> {
    WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter(|e| {
            let rel = e.path().strip_prefix(dir).unwrap_or(e.path());
            !skip.iter().any(|s| rel.starts_with(s))
        })
        .filter_map(|e| std::fs::read_to_string(e.path()).ok())
        .collect()
}

/// Inputs the guards need beyond the candidate's metrics.
#[derive(Debug, Clone, Copy)]
pub struct GuardContext<'a> {
    pub stage: Stage,
    pub accepted_digest: &'a str,
    pub candidate_digest: &'a str,
    /// Artifact previously stored for the candidate digest, if any.
    pub cached: Option<&'a MetricsArtifact>,
    /// `None` when the eval split could not be read.
    pub eval_examples: Option<&'a [String]>,
    pub artifact_texts: &'a [String],
}

const INPUTS_MISSING: &str = "inputs missing";

pub fn check_guards(
    candidate: &MetricsArtifact,
    policy: &ResolvedPolicy,
    ctx: &GuardContext<'_>,
) -> GuardReport {
    let outcomes: Vec<GuardOutcome> = policy
        .guards
        .iter()
        .map(|guard| {
            let (pass, detail) = match *guard {
                Guard::OverfitGap { max_gap } => {
                    match (policy.train_value(candidate), candidate.split_value(crate::metrics::EVAL_SPLIT, &policy.metric)) {
                        (Some(train), Some(eval)) => {
                            let gap = train - eval;
                            (gap < max_gap, format!("gap {gap:.4} vs max {max_gap}"))
                        }
                        _ => (false, INPUTS_MISSING.to_string()),
                    }
                }
                Guard::Leakage => match ctx.eval_examples {
                    Some(examples) => {
                        let hits = leakage_scan(examples, ctx.artifact_texts);
                        (hits.is_empty(), format!("{} eval example(s) found in artifacts", hits.len()))
                    }
                    None => (false, INPUTS_MISSING.to_string()),
                },
                Guard::StagedCorrectness => match (ctx.stage, candidate.tests) {
                    (Stage::Performance, Some(t)) => (
                        t.all_pass(),
                        format!("performance stage requires all tests: {}/{}", t.passed, t.total),
                    ),
                    (Stage::Performance, None) => (false, INPUTS_MISSING.to_string()),
                    (stage, _) => (true, format!("{} stage", stage.as_str())),
                },
                Guard::DeterminismCache => {
                    if ctx.candidate_digest == ctx.accepted_digest {
                        (false, "candidate identical to accepted snapshot".to_string())
                    } else if ctx.cached.is_some_and(|c| c != candidate) {
                        (false, "cached artifact for this snapshot differs".to_string())
                    } else {
                        (true, "snapshot changed; no conflicting cache entry".to_string())
                    }
                }
            };
            GuardOutcome {
                guard: guard.name(),
                pass,
                detail,
            }
        })
        .collect();
    let overall_pass = outcomes.iter().all(|o| o.pass);
    GuardReport {
        outcomes,
        overall_pass,
    }
}

pub fn decide_verdict(
    delta: &DeltaRecord,
    guards: &GuardReport,
    stage: Stage,
    _policy: &ResolvedPolicy,
) -> Verdict {
    if let Some(g) = guards.first_failure() {
        return Verdict::Reject(RejectReason::GuardViolation(g));
    }
    if stage == Stage::Correctness {
        if let Some(c) = &delta.correctness {
            return if c.candidate_ratio > c.accepted_ratio {
                Verdict::Accept
            } else if c.candidate_ratio < c.accepted_ratio {
                Verdict::Reject(RejectReason::Regression)
            } else {
                Verdict::Reject(RejectReason::InsufficientGain)
            };
        }
    }
    if delta.improvement < 0.0 {
        Verdict::Reject(RejectReason::Regression)
    } else if !delta.meets_min_delta {
        Verdict::Reject(RejectReason::InsufficientGain)
    } else {
        Verdict::Accept
    }
}

/// One-sentence justification recorded next to the verdict.
pub fn rationale(delta: &DeltaRecord, guards: &GuardReport, stage: Stage, verdict: &Verdict) -> String {
    if let Some(g) = guards.first_failure() {
        let detail = guards.outcome(g).map(|o| o.detail.as_str()).unwrap_or("");
        return format!("guard {g} failed: {detail}");
    }
    if stage == Stage::Correctness {
        if let Some(c) = &delta.correctness {
            return format!(
                "correctness stage: pass ratio {:.4} -> {:.4}",
                c.accepted_ratio, c.candidate_ratio
            );
        }
    }
    let cmp = if delta.meets_min_delta { ">=" } else { "<" };
    format!(
        "{} {} -> {}: improvement {:.4} {cmp} min_delta {} ({})",
        delta.metric,
        delta.accepted_value,
        delta.candidate_value,
        delta.improvement,
        delta.min_delta,
        verdict
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::resolve_policy;
    use crate::spec::tests::rule_spec;
    use crate::spec::{TaskType};
    use proptest::prelude::*;

    fn acc(train: f64, eval: f64) -> MetricsArtifact {
        MetricsArtifact::default()
            .with_split("train", "accuracy", train)
            .with_split("eval", "accuracy", eval)
    }

    fn finetune() -> ResolvedPolicy {
        let mut spec = rule_spec();
        spec.run.task_type = TaskType::Finetune;
        spec.evaluation.min_delta = 0.02;
        spec.evaluation.deterministic = false;
        resolve_policy(&spec)
    }

    fn code() -> ResolvedPolicy {
        let mut spec = rule_spec();
        spec.run.task_type = TaskType::CodeImprovement;
        spec.evaluation.primary_metric = "fib_1e6".into();
        spec.evaluation.min_delta = 0.05;
        spec.evaluation.deterministic = false;
        resolve_policy(&spec)
    }

    fn timing(passed: u32, ms: f64) -> MetricsArtifact {
        MetricsArtifact::default().with_tests(passed, 19).with_timing("fib_1e6", ms)
    }

    fn ctx(stage: Stage) -> GuardContext<'static> {
        GuardContext {
            stage,
            accepted_digest: "a",
            candidate_digest: "b",
            cached: None,
            eval_examples: None,
            artifact_texts: &[],
        }
    }

    #[test]
    fn mnist_round_two_accepts() {
        let p = finetune();
        let d = compute_delta(&acc(0.6050, 0.5333), &acc(0.7100, 0.6167), &p).unwrap();
        assert!((d.improvement - 0.0834).abs() < 1e-9);
        assert!(d.meets_min_delta);
        let g = check_guards(&acc(0.7100, 0.6167), &p, &ctx(Stage::Single));
        assert!(g.overall_pass);
        assert_eq!(decide_verdict(&d, &g, Stage::Single, &p), Verdict::Accept);
    }

    #[test]
    fn mnist_round_three_is_regression_with_passing_gap() {
        let p = finetune();
        let cand = acc(0.6700, 0.5500);
        let d = compute_delta(&acc(0.7100, 0.6167), &cand, &p).unwrap();
        assert!((d.improvement + 0.0667).abs() < 1e-9);
        let g = check_guards(&cand, &p, &ctx(Stage::Single));
        assert!(g.overall_pass, "gap 0.12 < 0.15");
        assert_eq!(
            decide_verdict(&d, &g, Stage::Single, &p),
            Verdict::Reject(RejectReason::Regression)
        );
    }

    #[test]
    fn wide_gap_fails_overfit_guard() {
        let p = finetune();
        let g = check_guards(&acc(0.90, 0.70), &p, &ctx(Stage::Single));
        assert!(!g.overall_pass);
        assert_eq!(g.first_failure(), Some(GuardName::OverfitGap));
        let g = check_guards(&MetricsArtifact::default().with_split("eval", "accuracy", 0.7), &p, &ctx(Stage::Single));
        assert_eq!(g.outcomes[0].detail, "inputs missing");
    }

    #[test]
    fn identical_values_do_not_meet_positive_min_delta() {
        let p = finetune();
        let d = compute_delta(&acc(0.9, 0.8), &acc(0.9, 0.8), &p).unwrap();
        assert_eq!(d.improvement, 0.0);
        assert!(!d.meets_min_delta);
        let g = GuardReport { outcomes: vec![], overall_pass: true };
        assert_eq!(
            decide_verdict(&d, &g, Stage::Single, &p),
            Verdict::Reject(RejectReason::InsufficientGain)
        );
    }

    #[test]
    fn iris_round_three_no_eval_gain() {
        let p = resolve_policy(&rule_spec());
        let d = compute_delta(&acc(0.9619, 1.0), &acc(0.9810, 1.0), &p).unwrap();
        let g = GuardReport { outcomes: vec![], overall_pass: true };
        assert_eq!(
            decide_verdict(&d, &g, Stage::Single, &p),
            Verdict::Reject(RejectReason::InsufficientGain)
        );
    }

    #[test]
    fn tie_at_min_delta_accepts() {
        let mut p = finetune();
        p.min_delta = 0.25;
        let d = compute_delta(&acc(0.0, 0.5), &acc(0.0, 0.75), &p).unwrap();
        assert_eq!(d.improvement, 0.25);
        assert!(d.meets_min_delta);
    }

    #[test]
    fn fibonacci_relative_deltas() {
        let p = code();
        let d = compute_delta(&timing(19, 34.3), &timing(19, 2.39), &p).unwrap();
        // hand arithmetic: (34.3 - 2.39) / 34.3
        assert!((d.improvement - 0.930320699708).abs() < 1e-9);
        assert!(d.meets_min_delta);
        let d = compute_delta(&timing(19, 2.39), &timing(19, 1.33), &p).unwrap();
        assert!((d.improvement - 0.443514644351).abs() < 1e-9);
        let err = compute_delta(&timing(19, 0.0), &timing(19, 1.0), &p).unwrap_err();
        assert_eq!(err, ReviewError::ZeroBaseline("fib_1e6".into()));
    }

    #[test]
    fn missing_metric_is_an_error() {
        let p = finetune();
        let err = compute_delta(&acc(0.1, 0.2), &MetricsArtifact::default(), &p).unwrap_err();
        assert!(matches!(err, ReviewError::MissingMetric { which: "candidate", .. }));
    }

    #[test]
    fn stages() {
        let p = code();
        assert_eq!(current_stage(&timing(17, 8420.0), &p), Ok(Stage::Correctness));
        assert_eq!(current_stage(&timing(19, 34.3), &p), Ok(Stage::Performance));
        assert_eq!(current_stage(&MetricsArtifact::default(), &p), Err(ReviewError::MissingTests));
        assert_eq!(current_stage(&acc(0.1, 0.2), &finetune()), Ok(Stage::Single));
    }

    #[test]
    fn correctness_stage_accepts_any_strict_increase() {
        let p = code();
        let d = compute_delta(&timing(17, 8420.0), &timing(19, 34.3), &p).unwrap();
        assert!((d.improvement - 0.995926365796).abs() < 1e-9);
        let g = check_guards(&timing(19, 34.3), &p, &ctx(Stage::Correctness));
        assert_eq!(decide_verdict(&d, &g, Stage::Correctness, &p), Verdict::Accept);
        // faster but no more tests passing: not accepted in correctness stage
        let d = compute_delta(&timing(17, 8420.0), &timing(17, 10.0), &p).unwrap();
        assert_eq!(
            decide_verdict(&d, &g, Stage::Correctness, &p),
            Verdict::Reject(RejectReason::InsufficientGain)
        );
    }

    #[test]
    fn performance_stage_rejects_broken_tests() {
        let p = code();
        let g = check_guards(&timing(18, 1.0), &p, &ctx(Stage::Performance));
        assert_eq!(g.first_failure(), Some(GuardName::StagedCorrectness));
        let d = compute_delta(&timing(19, 34.3), &timing(18, 1.0), &p).unwrap();
        assert_eq!(
            decide_verdict(&d, &g, Stage::Performance, &p),
            Verdict::Reject(RejectReason::GuardViolation(GuardName::StagedCorrectness))
        );
    }

    #[test]
    fn leakage_scan_cases() {
        let eval = vec!["An utterly charming and hilarious film".to_string(), "bad".to_string()];
        let prompt = vec![format!("Classify sentiment.\nExample: {}\n", eval[0])];
        assert_eq!(leakage_scan(&eval, &prompt), vec![0]);
        let fewshot = vec!["Example: a gorgeous, witty, seductive movie".to_string()];
        assert!(leakage_scan(&eval, &fewshot).is_empty());
        // normalization oracle by hand: lowercase + collapsed whitespace
        let shouty = vec!["AN  UTTERLY\tcharming and\n hilarious FILM!".to_string()];
        assert_eq!(leakage_scan(&eval, &shouty), vec![0]);
        // short examples need whole-text equality
        assert!(leakage_scan(&eval, &["this is bad".to_string()]).is_empty());
        assert_eq!(leakage_scan(&eval, &["  BAD ".to_string()]), vec![1]);
    }

    #[test]
    fn verdict_serialization() {
        let v = Verdict::Reject(RejectReason::GuardViolation(GuardName::OverfitGap));
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"{"kind":"reject","reason":"guard_violation:overfit_gap"}"#);
        assert_eq!(serde_json::from_str::<Verdict>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Verdict>(r#"{"kind":"accept","reason":"x"}"#).is_err());
        assert!(serde_json::from_str::<Verdict>(r#"{"kind":"reject"}"#).is_err());
        assert_eq!(v.to_string(), "Reject(guard_violation:overfit_gap)");
    }

    fn outcome_set() -> impl Strategy<Value = GuardReport> {
        prop::collection::vec(any::<bool>(), 0..4).prop_map(|passes| {
            let names = [GuardName::OverfitGap, GuardName::Leakage, GuardName::StagedCorrectness, GuardName::DeterminismCache];
            let outcomes: Vec<_> = passes
                .iter()
                .zip(names)
                .map(|(&pass, guard)| GuardOutcome { guard, pass, detail: String::new() })
                .collect();
            let overall_pass = outcomes.iter().all(|o| o.pass);
            GuardReport { outcomes, overall_pass }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn never_accept_on_guard_failure(
            a in -1e3f64..1e3, c in -1e3f64..1e3, min_delta in 0.0f64..1.0,
            guards in outcome_set(),
            stage in prop_oneof![Just(Stage::Single), Just(Stage::Performance), Just(Stage::Correctness)],
        ) {
            let mut p = finetune();
            p.min_delta = min_delta;
            let d = compute_delta(&acc(0.0, a), &acc(0.0, c), &p).unwrap();
            let v = decide_verdict(&d, &guards, stage, &p);
            if v == Verdict::Accept {
                prop_assert!(guards.overall_pass);
                prop_assert!(d.meets_min_delta);
            }
            if !guards.overall_pass {
                prop_assert!(matches!(v, Verdict::Reject(RejectReason::GuardViolation(_))));
            }
        }

        #[test]
        fn absolute_maximize_is_shift_invariant(
            a in 0i64..10_000, c in 0i64..10_000, shift in -10_000i64..10_000, md in 0i64..100,
        ) {
            // integer-valued metrics keep the shifted differences exact
            let mut p = finetune();
            p.min_delta = md as f64;
            let g = GuardReport { outcomes: vec![], overall_pass: true };
            let v1 = decide_verdict(&compute_delta(&acc(0.0, a as f64), &acc(0.0, c as f64), &p).unwrap(), &g, Stage::Single, &p);
            let (a2, c2) = ((a + shift) as f64, (c + shift) as f64);
            let v2 = decide_verdict(&compute_delta(&acc(0.0, a2), &acc(0.0, c2), &p).unwrap(), &g, Stage::Single, &p);
            prop_assert_eq!(v1, v2);
        }

        #[test]
        fn verdict_is_pure(a in 0.0f64..1.0, c in 0.0f64..1.0, t in 0.0f64..1.0) {
            let p = finetune();
            let cand = acc(t, c);
            let run = || {
                let d = compute_delta(&acc(0.5, a), &cand, &p).unwrap();
                let g = check_guards(&cand, &p, &ctx(Stage::Single));
                decide_verdict(&d, &g, Stage::Single, &p)
            };
            prop_assert_eq!(run(), run());
        }

        #[test]
        fn leakage_scan_finds_planted_examples(
            prefix in "[a-z ]{0,30}", example in "[a-z]{5,10}( [a-z]{3,8}){4,6}", suffix in "[a-z ]{0,30}",
        ) {
            let eval = vec![example.clone()];
            let planted = vec![format!("{prefix} {} {suffix}", example.to_uppercase())];
            prop_assert_eq!(leakage_scan(&eval, &planted), vec![0]);
        }
    }
}
