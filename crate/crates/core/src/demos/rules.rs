//! Rule-set classifier demo on the embedded flower dataset.
//!
//! Rows are split by hashing their index with a 64-bit mixer; the 45 rows
//! with the lowest hashes form the eval split, the other 105 the train split.

use std::cmp::Ordering;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::metrics::{canonical_json, MetricsArtifact, EVAL_SPLIT, TRAIN_SPLIT};

pub const IRIS_CSV: &str = include_str!("../../data/iris.csv");
pub const BASELINE_RULES: &str = include_str!("../../data/iris_baseline_rules.json");

pub const SPLIT_SEED: u64 = 29;
pub const EVAL_ROWS: usize = 45;
pub const METRIC: &str = "accuracy";
pub const RULES_FILE: &str = "rules/rules.json";
/// Largest threshold move the hill climber proposes.
pub const MAX_SHIFT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">=")]
    Ge,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Lt => "<",
            Op::Ge => ">=",
        }
    }

    fn holds(self, x: f64, t: f64) -> bool {
        match self {
            Op::Lt => x < t,
            Op::Ge => x >= t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub feature: String,
    pub op: Op,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub conditions: Vec<Condition>,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
    pub default_class: String,
}

impl RuleSet {
    pub fn parse(text: &str) -> Result<RuleSet, String> {
        serde_json::from_str(text).map_err(|e| format!("malformed rule set: {e}"))
    }

    pub fn baseline() -> RuleSet {
        RuleSet::parse(BASELINE_RULES).expect("shipped baseline rules parse")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("rule set serializes");
        s.push('\n');
        s
    }

    fn compile(&self, features: &[String]) -> Result<Vec<(Vec<(usize, Op, f64)>, &str)>, String> {
        self.rules
            .iter()
            .map(|r| {
                let conds = r
                    .conditions
                    .iter()
                    .map(|c| {
                        let i = features
                            .iter()
                            .position(|f| *f == c.feature)
                            .ok_or_else(|| format!("unknown feature `{}`", c.feature))?;
                        Ok((i, c.op, c.threshold))
                    })
                    .collect::<Result<Vec<_>, String>>()?;
                Ok((conds, r.class.as_str()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub features: Vec<String>,
    pub rows: Vec<(Vec<f64>, String)>,
}

impl Table {
    /// Header row of feature names followed by the class column.
    pub fn parse_csv(text: &str) -> Result<Table, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or("empty table")?.split(',').collect();
        if header.len() < 2 {
            return Err("table needs at least one feature and a class column".into());
        }
        let features: Vec<String> = header[..header.len() - 1].iter().map(|s| s.trim().to_string()).collect();
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let cells: Vec<&str> = line.split(',').map(str::trim).collect();
                if cells.len() != header.len() {
                    return Err(format!("row {} has {} cells, expected {}", i + 1, cells.len(), header.len()));
                }
                let x = cells[..features.len()]
                    .iter()
                    .map(|c| c.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1)))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((x, cells[features.len()].to_string()))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(Table { features, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.features.join(",");
        out.push_str(",species\n");
        for (x, class) in &self.rows {
            let cells: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push(',');
            out.push_str(class);
            out.push('\n');
        }
        out
    }

    fn subset(&self, idx: &[usize]) -> Table {
        Table {
            features: self.features.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// The splitmix64 finalizer.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Row indices of the eval split, ascending.
pub fn eval_indices(n: usize, seed: u64, eval_rows: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix64(seed ^ i as u64), i));
    let mut ev: Vec<usize> = order.into_iter().take(eval_rows).collect();
    ev.sort_unstable();
    ev
}

pub struct Iris {
    pub all: Table,
    pub train: Table,
    pub eval: Table,
}

pub fn iris() -> &'static Iris {
    static IRIS: OnceLock<Iris> = OnceLock::new();
    IRIS.get_or_init(|| {
        let all = Table::parse_csv(IRIS_CSV).expect("embedded dataset parses");
        let ev = eval_indices(all.rows.len(), SPLIT_SEED, EVAL_ROWS);
        let tr: Vec<usize> = (0..all.rows.len()).filter(|i| ev.binary_search(i).is_err()).collect();
        Iris {
            train: all.subset(&tr),
            eval: all.subset(&ev),
            all,
        }
    })
}

fn predict<'a>(compiled: &[(Vec<(usize, Op, f64)>, &'a str)], default: &'a str, x: &[f64]) -> &'a str {
    compiled
        .iter()
        .find(|(conds, _)| conds.iter().all(|&(f, op, t)| op.holds(x[f], t)))
        .map_or(default, |(_, c)| c)
}

pub fn errors(rules: &RuleSet, table: &Table) -> Result<usize, String> {
    let compiled = rules.compile(&table.features)?;
    Ok(table
        .rows
        .iter()
        .filter(|(x, y)| predict(&compiled, &rules.default_class, x) != y)
        .count())
}

pub fn accuracy(rules: &RuleSet, table: &Table) -> Result<f64, String> {
    if table.rows.is_empty() {
        return Err("empty split".into());
    }
    let e = errors(rules, table)?;
    Ok((table.rows.len() - e) as f64 / table.rows.len() as f64)
}

/// Train and eval accuracy on the embedded split.
pub fn eval_rules(rules: &RuleSet) -> Result<MetricsArtifact, String> {
    let d = iris();
    Ok(MetricsArtifact::default()
        .with_split(TRAIN_SPLIT, METRIC, accuracy(rules, &d.train)?)
        .with_split(EVAL_SPLIT, METRIC, accuracy(rules, &d.eval)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub rules: RuleSet,
    pub description: String,
    pub errors_before: usize,
    pub errors_after: usize,
}

fn midpoints(table: &Table, f: usize) -> Vec<f64> {
    let mut v: Vec<f64> = table.rows.iter().map(|(x, _)| x[f]).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.windows(2)
        .map(|w| {
            // two decimals, so thresholds stay readable in the rule file
            format!("{:.2}", (w[0] + w[1]) / 2.0).parse().expect("formatted float parses")
        })
        .collect()
}

struct Scored {
    errors: usize,
    kind: u8,
    shift: f64,
    rule: usize,
    cond: usize,
    feature: usize,
    op: Op,
    threshold: f64,
    rules: RuleSet,
    description: String,
}

fn rank(a: &Scored, b: &Scored) -> Ordering {
    (a.errors, a.kind)
        .cmp(&(b.errors, b.kind))
        .then(a.shift.total_cmp(&b.shift))
        .then((a.rule, a.cond, a.feature, a.op).cmp(&(b.rule, b.cond, b.feature, b.op)))
        .then(a.threshold.total_cmp(&b.threshold))
}

/// One bounded threshold shift or one added condition that strictly reduces
/// train errors; rule sets in `tried` are skipped. Candidates are ranked by
/// resulting errors, then shifts before additions, then smaller shifts.
pub fn hillclimb(rules: &RuleSet, train: &Table, tried: &[RuleSet]) -> Result<Option<Proposal>, String> {
    let base = errors(rules, train)?;
    let mids: Vec<Vec<f64>> = (0..train.features.len()).map(|f| midpoints(train, f)).collect();
    let feature_index = |name: &str| {
        train
            .features
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| format!("unknown feature `{name}`"))
    };
    let mut scored: Vec<Scored> = Vec::new();
    let mut consider = |candidate: RuleSet, s: Scored| -> Result<(), String> {
        if tried.contains(&candidate) {
            return Ok(());
        }
        let e = errors(&candidate, train)?;
        if e < base {
            scored.push(Scored {
                errors: e,
                rules: candidate,
                ..s
            });
        }
        Ok(())
    };
    for (ri, rule) in rules.rules.iter().enumerate() {
        for (ci, cond) in rule.conditions.iter().enumerate() {
            let f = feature_index(&cond.feature)?;
            for &m in &mids[f] {
                let shift = (m - cond.threshold).abs();
                if m == cond.threshold || shift > MAX_SHIFT + 1e-9 {
                    continue;
                }
                let mut cand = rules.clone();
                cand.rules[ri].conditions[ci].threshold = m;
                let description = format!(
                    "shift {} {} {} -> {} in rule {} ({})",
                    cond.feature,
                    cond.op.symbol(),
                    cond.threshold,
                    m,
                    ri + 1,
                    rule.class
                );
                consider(
                    cand,
                    Scored {
                        errors: 0,
                        kind: 0,
                        shift,
                        rule: ri,
                        cond: ci,
                        feature: f,
                        op: cond.op,
                        threshold: m,
                        rules: rules.clone(),
                        description,
                    },
                )?;
            }
        }
        for (f, name) in train.features.iter().enumerate() {
            for op in [Op::Lt, Op::Ge] {
                for &m in &mids[f] {
                    let mut cand = rules.clone();
                    cand.rules[ri].conditions.push(Condition {
                        feature: name.clone(),
                        op,
                        threshold: m,
                    });
                    let description = format!(
                        "add condition {name} {} {m} to rule {} ({})",
                        op.symbol(),
                        ri + 1,
                        rule.class
                    );
                    consider(
                        cand,
                        Scored {
                            errors: 0,
                            kind: 1,
                            shift: 0.0,
                            rule: ri,
                            cond: rule.conditions.len(),
                            feature: f,
                            op,
                            threshold: m,
                            rules: rules.clone(),
                            description,
                        },
                    )?;
                }
            }
        }
    }
    Ok(scored.into_iter().min_by(rank).map(|s| Proposal {
        errors_before: base,
        errors_after: s.errors,
        description: s.description,
        rules: s.rules,
    }))
}

/// Misclassified train rows, grouped as `actual -> predicted: count`.
pub fn error_report(rules: &RuleSet, table: &Table) -> Result<Vec<String>, String> {
    let compiled = rules.compile(&table.features)?;
    let mut counts = std::collections::BTreeMap::<(String, String), usize>::new();
    for (x, y) in &table.rows {
        let p = predict(&compiled, &rules.default_class, x);
        if p != y {
            *counts.entry((y.clone(), p.to_string())).or_default() += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|((a, p), n)| format!("{a} -> {p}: {n}"))
        .collect())
}

/// Stable identity for comparing rule sets in reports.
pub fn fingerprint(rules: &RuleSet) -> String {
    String::from_utf8(canonical_json(rules)).expect("canonical JSON is UTF-8")
}
