//! The orchestrator's state machine. `step` is pure: the engine feeds it
//! events produced by drivers, the harness and the reviewer, and
//! `load_state` feeds it the same events read back from disk.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsArtifact;
use crate::policy::ResolvedPolicy;
use crate::review::{RejectReason, TerminateReason, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Init,
    Phase1,
    Phase2,
    Done,
}

/// Position inside a Phase II try.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Awaiting {
    Investigation,
    Candidate,
    Evaluation,
    Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptedState {
    pub digest: String,
    pub metrics: MetricsArtifact,
    pub round: u32,
    pub tries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Termination {
    pub reason: TerminateReason,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    pub tries: u32,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Pending {
    pub wants_retry: bool,
    pub digest: Option<String>,
    pub metrics: Option<MetricsArtifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub phase: Phase,
    pub awaiting: Awaiting,
    pub accepted: Option<AcceptedState>,
    /// 0 is the baseline; optimization rounds start at 1.
    pub round: u32,
    pub tries_used_this_round: u32,
    pub history: Vec<HistoryEntry>,
    pub termination: Option<Termination>,
    pub pending: Option<Pending>,
}

impl RunState {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            phase: Phase::Init,
            awaiting: Awaiting::Investigation,
            accepted: None,
            round: 0,
            tries_used_this_round: 0,
            history: Vec::new(),
            termination: None,
            pending: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    BaselineReady { digest: String, metrics: MetricsArtifact },
    InvestigationReady { has_hypothesis: bool, wants_retry_on_reject: bool },
    CandidateReady { digest: String },
    EvaluationReady { metrics: MetricsArtifact },
    VerdictReady(Verdict),
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::BaselineReady { .. } => "BaselineReady",
            Event::InvestigationReady { .. } => "InvestigationReady",
            Event::CandidateReady { .. } => "CandidateReady",
            Event::EvaluationReady { .. } => "EvaluationReady",
            Event::VerdictReady(_) => "VerdictReady",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("illegal event {got} in phase {phase:?}: expected {expected}")]
pub struct IllegalEvent {
    pub expected: &'static str,
    pub got: &'static str,
    pub phase: Phase,
}

fn expected(state: &RunState) -> &'static str {
    match state.phase {
        Phase::Init | Phase::Phase1 => "BaselineReady",
        Phase::Done => "nothing (run is done)",
        Phase::Phase2 => match state.awaiting {
            Awaiting::Investigation => "InvestigationReady",
            Awaiting::Candidate => "CandidateReady",
            Awaiting::Evaluation => "EvaluationReady",
            Awaiting::Verdict => "VerdictReady",
        },
    }
}

pub fn step(state: &RunState, event: Event, policy: &ResolvedPolicy) -> Result<RunState, IllegalEvent> {
    let illegal = |s: &RunState, e: &Event| IllegalEvent {
        expected: expected(s),
        got: e.kind(),
        phase: s.phase,
    };
    let mut next = state.clone();
    match (state.phase, state.awaiting, event) {
        (Phase::Init | Phase::Phase1, _, Event::BaselineReady { digest, metrics }) => {
            next.accepted = Some(AcceptedState {
                digest,
                metrics,
                round: 0,
                tries: 0,
            });
            next.history.push(HistoryEntry {
                round: 0,
                tries: 0,
                verdict: Verdict::BaselineAccepted,
            });
            next.phase = Phase::Phase2;
            if policy.multi_round {
                advance(&mut next, policy);
            } else {
                finish(&mut next, TerminateReason::BudgetExhausted, 0, 0);
            }
        }
        (Phase::Phase2, _, Event::VerdictReady(Verdict::Terminate(reason))) => {
            // Budget and saturation are detected between rounds and belong
            // to the last executed one.
            let between_rounds = state.awaiting == Awaiting::Investigation
                && state.tries_used_this_round == 0
                && matches!(reason, TerminateReason::BudgetExhausted | TerminateReason::Saturated);
            if between_rounds {
                finish(&mut next, reason, state.round.saturating_sub(1), 0);
            } else {
                finish(&mut next, reason, state.round, state.tries_used_this_round);
            }
        }
        (Phase::Phase2, _, Event::VerdictReady(Verdict::Reject(RejectReason::Error))) => {
            reject(&mut next, RejectReason::Error, policy);
        }
        (Phase::Phase2, Awaiting::Investigation, Event::InvestigationReady { has_hypothesis, wants_retry_on_reject }) => {
            if has_hypothesis {
                next.pending = Some(Pending {
                    wants_retry: wants_retry_on_reject,
                    ..Pending::default()
                });
                next.awaiting = Awaiting::Candidate;
            } else {
                finish(&mut next, TerminateReason::NoHypothesis, state.round, state.tries_used_this_round);
            }
        }
        (Phase::Phase2, Awaiting::Candidate, Event::CandidateReady { digest }) => {
            next.pending.get_or_insert_with(Pending::default).digest = Some(digest);
            next.awaiting = Awaiting::Evaluation;
        }
        (Phase::Phase2, Awaiting::Evaluation, Event::EvaluationReady { metrics }) => {
            next.pending.get_or_insert_with(Pending::default).metrics = Some(metrics);
            next.awaiting = Awaiting::Verdict;
        }
        (Phase::Phase2, Awaiting::Verdict, Event::VerdictReady(verdict)) => match verdict {
            Verdict::Accept => {
                let pending = state.pending.clone().unwrap_or_default();
                match (pending.digest, pending.metrics) {
                    (Some(digest), Some(metrics)) => {
                        next.accepted = Some(AcceptedState {
                            digest,
                            metrics,
                            round: state.round,
                            tries: state.tries_used_this_round,
                        });
                    }
                    _ => return Err(illegal(state, &Event::VerdictReady(verdict))),
                }
                next.history.push(HistoryEntry {
                    round: state.round,
                    tries: state.tries_used_this_round,
                    verdict,
                });
                advance(&mut next, policy);
            }
            Verdict::Reject(reason) => reject(&mut next, reason, policy),
            other => return Err(illegal(state, &Event::VerdictReady(other))),
        },
        (_, _, event) => return Err(illegal(state, &event)),
    }
    Ok(next)
}

fn reject(state: &mut RunState, reason: RejectReason, policy: &ResolvedPolicy) {
    state.history.push(HistoryEntry {
        round: state.round,
        tries: state.tries_used_this_round,
        verdict: Verdict::Reject(reason),
    });
    let wants_retry = state.pending.as_ref().is_some_and(|p| p.wants_retry);
    let retries_left = state.tries_used_this_round < policy.max_retries;
    if retries_left && (wants_retry || reason == RejectReason::Error) {
        state.tries_used_this_round += 1;
        state.awaiting = Awaiting::Investigation;
        state.pending = None;
    } else if reason == RejectReason::Error {
        let (round, tries) = (state.round, state.tries_used_this_round);
        finish(state, TerminateReason::Error, round, tries);
    } else {
        advance(state, policy);
    }
}

fn advance(state: &mut RunState, policy: &ResolvedPolicy) {
    state.round += 1;
    state.tries_used_this_round = 0;
    state.awaiting = Awaiting::Investigation;
    state.pending = None;
    if state.round >= policy.max_rounds {
        let last = state.round - 1;
        finish(state, TerminateReason::BudgetExhausted, last, 0);
    }
}

fn finish(state: &mut RunState, reason: TerminateReason, round: u32, tries: u32) {
    state.phase = Phase::Done;
    state.pending = None;
    state.awaiting = Awaiting::Investigation;
    state.termination = Some(Termination { reason, round });
    state.history.push(HistoryEntry {
        round,
        tries,
        verdict: Verdict::Terminate(reason),
    });
}

/// Checked at the start of every round.
pub fn should_terminate(state: &RunState, policy: &ResolvedPolicy) -> Option<TerminateReason> {
    if state.phase != Phase::Phase2 {
        return None;
    }
    if state.round >= policy.max_rounds {
        return Some(TerminateReason::BudgetExhausted);
    }
    let accepted = state.accepted.as_ref()?;
    let value = policy.primary_value(&accepted.metrics)?;
    policy
        .is_saturated(value)
        .then_some(TerminateReason::Saturated)
}
