//! Default resolution: turns a task spec into the acceptance policy the
//! reviewer and orchestrator work from.

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricsArtifact, EVAL_SPLIT, TRAIN_SPLIT};
use crate::spec::{AccessScope, DeltaMode, Direction, GuardName, MetricSource, TaskSpec, TaskType};

pub const DEFAULT_MAX_GAP: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Guard {
    OverfitGap { max_gap: f64 },
    Leakage,
    StagedCorrectness,
    DeterminismCache,
}

impl Guard {
    pub fn name(&self) -> GuardName {
        match self {
            Guard::OverfitGap { .. } => GuardName::OverfitGap,
            Guard::Leakage => GuardName::Leakage,
            Guard::StagedCorrectness => GuardName::StagedCorrectness,
            Guard::DeterminismCache => GuardName::DeterminismCache,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPolicy {
    pub task_type: TaskType,
    pub metric: String,
    pub source: MetricSource,
    pub direction: Direction,
    pub delta_mode: DeltaMode,
    pub min_delta: f64,
    pub guards: Vec<Guard>,
    pub max_retries: u32,
    pub max_rounds: u32,
    pub saturation_bound: Option<f64>,
    pub access_scope: AccessScope,
    pub bounded: bool,
    pub deterministic: bool,
    /// Correctness-then-performance staging (code improvement).
    pub staged: bool,
    pub multi_round: bool,
}

impl ResolvedPolicy {
    /// The primary metric as the reviewer sees it.
    pub fn primary_value(&self, metrics: &MetricsArtifact) -> Option<f64> {
        match self.source {
            MetricSource::EvalSplit => metrics.split_value(EVAL_SPLIT, &self.metric),
            MetricSource::Timings => metrics.timing(&self.metric),
        }
    }

    pub fn train_value(&self, metrics: &MetricsArtifact) -> Option<f64> {
        metrics.split_value(TRAIN_SPLIT, &self.metric)
    }

    pub fn has_guard(&self, name: GuardName) -> bool {
        self.guards.iter().any(|g| g.name() == name)
    }

    /// Metrics that must lie in `[0, 1]`.
    pub fn bounded_metrics(&self) -> Vec<&str> {
        if self.bounded {
            vec![self.metric.as_str()]
        } else {
            Vec::new()
        }
    }

    /// True when `value` has reached the saturation bound.
    pub fn is_saturated(&self, value: f64) -> bool {
        match (self.saturation_bound, self.direction) {
            (Some(bound), Direction::Maximize) => value >= bound,
            (Some(bound), Direction::Minimize) => value <= bound,
            (None, _) => false,
        }
    }
}

pub fn resolve_policy(spec: &TaskSpec) -> ResolvedPolicy {
    let ev = &spec.evaluation;
    let task = spec.run.task_type;
    let code = task == TaskType::CodeImprovement;

    let direction = ev
        .metric_direction
        .unwrap_or(if code { Direction::Minimize } else { Direction::Maximize });
    let delta_mode = ev
        .delta_mode
        .unwrap_or(if code { DeltaMode::Relative } else { DeltaMode::Absolute });
    let source = ev
        .metric_source
        .unwrap_or(if code { MetricSource::Timings } else { MetricSource::EvalSplit });
    let max_gap = ev.max_train_eval_gap.unwrap_or(DEFAULT_MAX_GAP);

    let mut names: Vec<GuardName> = match &ev.guards {
        Some(explicit) => explicit.clone(),
        None => {
            let mut g = Vec::new();
            match task {
                TaskType::Finetune => g.push(GuardName::OverfitGap),
                TaskType::PromptTune => g.push(GuardName::Leakage),
                TaskType::CodeImprovement => g.push(GuardName::StagedCorrectness),
                TaskType::RuleBased | TaskType::Custom => {}
            }
            if ev.max_train_eval_gap.is_some() {
                g.push(GuardName::OverfitGap);
            }
            if ev.deterministic {
                g.push(GuardName::DeterminismCache);
            }
            g
        }
    };
    names.sort();
    names.dedup();
    let guards = names
        .into_iter()
        .map(|name| match name {
            GuardName::OverfitGap => Guard::OverfitGap { max_gap },
            GuardName::Leakage => Guard::Leakage,
            GuardName::StagedCorrectness => Guard::StagedCorrectness,
            GuardName::DeterminismCache => Guard::DeterminismCache,
        })
        .collect();

    let saturation_bound = ev.saturation_bound.or(if ev.bounded { Some(1.0) } else { None });

    ResolvedPolicy {
        task_type: task,
        metric: ev.primary_metric.clone(),
        source,
        direction,
        delta_mode,
        min_delta: ev.min_delta,
        guards,
        max_retries: spec.run.max_retries_per_round,
        max_rounds: spec.run.max_rounds,
        saturation_bound,
        access_scope: spec.investigation.access_scope,
        bounded: ev.bounded,
        deterministic: ev.deterministic,
        staged: code,
        multi_round: spec.phases.multi_round_optimization,
    }
}
