//! Synthetic hyperparameter surface standing in for a fine-tuning job.
//!
//! Each optimizer has a peak eval accuracy at some learning rate; accuracy
//! falls off quadratically in log10 space. The train/eval gap widens once the
//! learning rate passes 10^-2.3, so aggressive settings overfit.

use serde::{Deserialize, Serialize};

use crate::metrics::{MetricsArtifact, EVAL_SPLIT, TRAIN_SPLIT};

pub const PARAMS_FILE: &str = "params.json";
pub const BASELINE_PARAMS: &str = include_str!("../../data/synth_baseline.json");
pub const METRIC: &str = "accuracy";

pub const OPTIMIZERS: [&str; 3] = ["adam", "adamw", "sgd"];
const PEAK: [f64; 3] = [0.78, 0.83, 0.88];
const CENTER: [f64; 3] = [-3.0, -2.6, -2.3];
const CURVATURE: f64 = 0.15;
pub const LR_MIN: f64 = 1e-4;
pub const LR_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub optimizer: String,
    pub learning_rate: f64,
}

impl Params {
    pub fn parse(text: &str) -> Result<Params, String> {
        let p: Params = serde_json::from_str(text).map_err(|e| format!("malformed params: {e}"))?;
        p.check()?;
        Ok(p)
    }

    pub fn baseline() -> Params {
        Params::parse(BASELINE_PARAMS).expect("shipped baseline params parse")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("params serialize");
        s.push('\n');
        s
    }

    fn optimizer_index(&self) -> Result<usize, String> {
        OPTIMIZERS
            .iter()
            .position(|o| *o == self.optimizer)
            .ok_or_else(|| format!("unknown optimizer `{}`", self.optimizer))
    }

    fn check(&self) -> Result<(), String> {
        self.optimizer_index()?;
        if !(LR_MIN..=LR_MAX).contains(&self.learning_rate) {
            return Err(format!(
                "learning rate {} outside [{LR_MIN}, {LR_MAX}]",
                self.learning_rate
            ));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!("{}, lr={}", self.optimizer, self.learning_rate)
    }
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

/// `(train, eval)` accuracy, rounded to four decimals.
pub fn surface(p: &Params) -> Result<(f64, f64), String> {
    p.check()?;
    let o = p.optimizer_index()?;
    let x = p.learning_rate.log10();
    let eval = (PEAK[o] - CURVATURE * (x - CENTER[o]).powi(2)).clamp(0.0, 1.0);
    let gap = 0.03 + 0.8 * (x + 2.3).max(0.0);
    let train = (eval + gap).min(1.0);
    Ok((round4(train), round4(eval)))
}

pub fn eval_params(p: &Params) -> Result<MetricsArtifact, String> {
    let (train, eval) = surface(p)?;
    Ok(MetricsArtifact::default()
        .with_split(TRAIN_SPLIT, METRIC, train)
        .with_split(EVAL_SPLIT, METRIC, eval))
}

fn snap_lr(lr: f64) -> f64 {
    // keeps doubled and halved rates printable, e.g. 0.008 rather than 0.008000000000000002
    format!("{lr:.6e}").parse::<f64>().expect("formatted float parses").clamp(LR_MIN, LR_MAX)
}

/// Neighbours of `current`: the learning rate doubled and halved, and every
/// other optimizer at the same rate.
pub fn neighbours(current: &Params) -> Vec<Params> {
    let mut out = Vec::new();
    for lr in [current.learning_rate * 2.0, current.learning_rate * 0.5] {
        let lr = snap_lr(lr);
        if lr != current.learning_rate {
            out.push(Params {
                optimizer: current.optimizer.clone(),
                learning_rate: lr,
            });
        }
    }
    for o in OPTIMIZERS {
        if o != current.optimizer {
            out.push(Params {
                optimizer: o.into(),
                learning_rate: current.learning_rate,
            });
        }
    }
    out
}

/// The untried neighbour with the best train accuracy, provided it beats the
/// current train accuracy. Only the train split is consulted.
pub fn probe(current: &Params, tried: &[Params]) -> Result<Option<(Params, f64, f64)>, String> {
    let (base_train, _) = surface(current)?;
    let mut best: Option<(Params, f64)> = None;
    for n in neighbours(current) {
        if tried.contains(&n) {
            continue;
        }
        let (train, _) = surface(&n)?;
        if train <= base_train {
            continue;
        }
        let key = |p: &Params, t: f64| (-t, p.optimizer_index().unwrap_or(usize::MAX), p.learning_rate);
        let better = match &best {
            None => true,
            Some((b, bt)) => {
                let (a0, a1, a2) = key(&n, train);
                let (b0, b1, b2) = key(b, *bt);
                a0.total_cmp(&b0).then(a1.cmp(&b1)).then(a2.total_cmp(&b2)).is_lt()
            }
        };
        if better {
            best = Some((n, train));
        }
    }
    Ok(best.map(|(p, t)| (p, t, base_train)))
}
