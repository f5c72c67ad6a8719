//! Builtin drivers for the shipped demos. They see the same request as an
//! external driver and honour the same visibility rules.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{
    BaselinePayload, DriverError, DriverRequest, DriverResponse, ExecutorPayload, InvestigatorPayload,
    PlannerPayload,
};
use crate::demos::{ladder, rules, synth, EVALUATORS};
use crate::spec::Role;

const DRIVERS: [(&str, Role); 10] = [
    ("noop_planner", Role::SeedPlanner),
    ("rule_baseline", Role::BaselineExecutor),
    ("rule_hillclimb", Role::Investigator),
    ("rule_apply", Role::Executor),
    ("synth_baseline", Role::BaselineExecutor),
    ("hparam_probe", Role::Investigator),
    ("synth_apply", Role::Executor),
    ("ladder_baseline", Role::BaselineExecutor),
    ("code_ladder", Role::Investigator),
    ("ladder_apply", Role::Executor),
];

pub fn is_driver(name: &str) -> bool {
    DRIVERS.iter().any(|(n, _)| *n == name)
}

pub fn is_evaluator(name: &str) -> bool {
    EVALUATORS.contains(&name)
}

/// The role a builtin driver serves.
pub fn driver_role(name: &str) -> Option<Role> {
    DRIVERS.iter().find(|(n, _)| *n == name).map(|(_, r)| *r)
}

pub fn invoke(name: &str, request: &DriverRequest) -> Result<DriverResponse, DriverError> {
    let role = driver_role(name).ok_or_else(|| DriverError::UnknownBuiltin(name.to_string()))?;
    let fail = |message: String| DriverError::Failed {
        role: request.role,
        message: format!("{name}: {message}"),
    };
    if role != request.role {
        return Err(fail(format!("serves {role}, not {}", request.role)));
    }
    match name {
        "noop_planner" => Ok(DriverResponse::SeedPlanner(PlannerPayload {
            design: format!("Baseline for: {}", request.goal.trim()),
        })),
        "rule_baseline" => baseline(request, &[(rules::RULES_FILE, rules::BASELINE_RULES.to_string())], "Two petal thresholds").map_err(fail),
        "synth_baseline" => {
            let p = synth::Params::baseline();
            baseline(request, &[(synth::PARAMS_FILE, p.to_json())], &p.describe()).map_err(fail)
        }
        "ladder_baseline" => baseline(
            request,
            &[
                (ladder::SOURCE_FILE, ladder::source(0).expect("step 0 exists")),
                (ladder::TEST_FILE, ladder::TESTS_SOURCE.to_string()),
            ],
            ladder::LADDER[0].change,
        )
        .map_err(fail),
        "rule_hillclimb" => rule_hillclimb(request).map_err(fail),
        "hparam_probe" => hparam_probe(request).map_err(fail),
        "code_ladder" => code_ladder(request).map_err(fail),
        "rule_apply" => apply(request, |p| {
            let r: rules::RuleSet = serde_json::from_value(p.clone()).map_err(|e| e.to_string())?;
            Ok((rules::RULES_FILE, r.to_json()))
        })
        .map_err(fail),
        "synth_apply" => apply(request, |p| {
            let s: synth::Params = serde_json::from_value(p.clone()).map_err(|e| e.to_string())?;
            Ok((synth::PARAMS_FILE, s.to_json()))
        })
        .map_err(fail),
        "ladder_apply" => apply(request, |p| {
            let k = ladder_step(p).ok_or("proposal has no ladder step")?;
            Ok((ladder::SOURCE_FILE, ladder::source(k).ok_or("unknown ladder step")?))
        })
        .map_err(fail),
        _ => unreachable!("every registered driver is dispatched"),
    }
}

fn candidate_dir(request: &DriverRequest) -> Result<&Path, String> {
    request
        .candidate_dir
        .as_deref()
        .ok_or_else(|| "no candidate directory in request".to_string())
}

fn write_files(dir: &Path, files: &[(&str, String)]) -> Result<Vec<PathBuf>, String> {
    files
        .iter()
        .map(|(rel, text)| {
            let p = dir.join(rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| e.to_string())?;
            }
            fs::write(&p, text).map_err(|e| format!("cannot write {}: {e}", p.display()))?;
            Ok(PathBuf::from(rel))
        })
        .collect()
}

fn baseline(request: &DriverRequest, files: &[(&str, String)], description: &str) -> Result<DriverResponse, String> {
    let dir = candidate_dir(request)?;
    Ok(DriverResponse::BaselineExecutor(BaselinePayload {
        description: Some(description.to_string()),
        files: write_files(dir, files)?,
    }))
}

fn apply(
    request: &DriverRequest,
    render: impl Fn(&Value) -> Result<(&'static str, String), String>,
) -> Result<DriverResponse, String> {
    let inv = request.investigation.as_ref().ok_or("no investigation in request")?;
    let proposal = inv.proposal.as_ref().ok_or("investigation carries no proposal")?;
    let (rel, text) = render(proposal)?;
    let files = write_files(candidate_dir(request)?, &[(rel, text)])?;
    Ok(DriverResponse::Executor(ExecutorPayload {
        change: inv.hypothesis.clone().unwrap_or_default(),
        files,
    }))
}

/// The visible file whose path ends with `rel`.
fn visible(request: &DriverRequest, rel: &str) -> Option<PathBuf> {
    request.visible_paths.iter().find(|p| p.ends_with(rel)).cloned()
}

fn read_visible(request: &DriverRequest, rel: &str) -> Result<String, String> {
    let p = visible(request, rel).ok_or_else(|| format!("{rel} is not visible"))?;
    fs::read_to_string(&p).map_err(|e| format!("cannot read {}: {e}", p.display()))
}

fn proposals<'a, T: serde::de::DeserializeOwned>(request: &'a DriverRequest) -> impl Iterator<Item = T> + 'a {
    request
        .history
        .iter()
        .filter_map(|h| h.proposal.as_ref())
        .filter_map(|p| serde_json::from_value(p.clone()).ok())
}

fn hypothesis(report: String, hypothesis: String, proposal: Value) -> DriverResponse {
    DriverResponse::Investigator(InvestigatorPayload {
        report,
        hypothesis: Some(hypothesis),
        has_hypothesis: true,
        wants_retry_on_reject: true,
        proposal: Some(proposal),
    })
}

fn rule_hillclimb(request: &DriverRequest) -> Result<DriverResponse, String> {
    if visible(request, "eval.csv").is_some() {
        return Err("refusing to run with the eval split visible".into());
    }
    let train = rules::Table::parse_csv(&read_visible(request, "train.csv")?)?;
    let current = rules::RuleSet::parse(&read_visible(request, rules::RULES_FILE)?)?;
    let mut tried: Vec<rules::RuleSet> = proposals(request).collect();
    tried.push(current.clone());
    let acc = rules::accuracy(&current, &train)?;
    let mut report = format!(
        "Train accuracy {acc:.4} ({} of {} rows misclassified).\n",
        rules::errors(&current, &train)?,
        train.rows.len()
    );
    for line in rules::error_report(&current, &train)? {
        report.push_str(&format!("- {line}\n"));
    }
    Ok(match rules::hillclimb(&current, &train, &tried)? {
        Some(p) => {
            report.push_str(&format!(
                "Best single edit: {} (train errors {} -> {}).",
                p.description, p.errors_before, p.errors_after
            ));
            hypothesis(report, p.description, serde_json::to_value(&p.rules).expect("rules serialize"))
        }
        None => {
            report.push_str("No untried single edit reduces train errors.");
            DriverResponse::Investigator(InvestigatorPayload::no_hypothesis(report))
        }
    })
}

fn hparam_probe(request: &DriverRequest) -> Result<DriverResponse, String> {
    let current = synth::Params::parse(&read_visible(request, synth::PARAMS_FILE)?)?;
    let mut tried: Vec<synth::Params> = proposals(request).collect();
    tried.push(current.clone());
    Ok(match synth::probe(&current, &tried)? {
        Some((next, train, before)) => {
            let report = format!(
                "Probed {} neighbours of {}; best untried is {} with train accuracy {train:.4} (current {before:.4}).",
                synth::neighbours(&current).len(),
                current.describe(),
                next.describe()
            );
            hypothesis(report, next.describe(), serde_json::to_value(&next).expect("params serialize"))
        }
        None => DriverResponse::Investigator(InvestigatorPayload::no_hypothesis(format!(
            "No untried neighbour of {} improves train accuracy.",
            current.describe()
        ))),
    })
}

fn ladder_step(v: &Value) -> Option<usize> {
    v.get("step")?.as_u64().map(|k| k as usize)
}

fn code_ladder(request: &DriverRequest) -> Result<DriverResponse, String> {
    let dir = visible(request, ladder::SOURCE_FILE)
        .and_then(|p| p.parent()?.parent().map(Path::to_path_buf))
        .ok_or_else(|| format!("{} is not visible", ladder::SOURCE_FILE))?;
    let current = ladder::read_step(&dir)?;
    let tried = request
        .history
        .iter()
        .filter_map(|h| h.proposal.as_ref().and_then(ladder_step))
        .chain([current])
        .max()
        .unwrap_or(current);
    let next = tried + 1;
    Ok(match ladder::step(next) {
        Some(s) => hypothesis(
            format!("Current implementation is ladder step {current}; next untried step is {next}."),
            s.change.to_string(),
            serde_json::json!({ "step": next }),
        ),
        None => DriverResponse::Investigator(InvestigatorPayload::no_hypothesis(
            "No meaningful further gain detected",
        )),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::materialize_builtin;
    use crate::drivers::tests::request;
    use crate::drivers::{visible_paths, HistoryItem};
    use crate::review::Verdict;
    use crate::spec::AccessScope;

    fn rules_workspace() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        materialize_builtin(crate::demos::IRIS_SOURCE, &dir.path().join("data")).unwrap();
        let mut req = request(Role::BaselineExecutor);
        req.candidate_dir = Some(dir.path().to_path_buf());
        invoke("rule_baseline", &req).unwrap();
        dir
    }

    #[test]
    fn registry() {
        assert!(is_driver("rule_hillclimb"));
        assert!(!is_driver("rules"));
        assert!(is_evaluator("rules"));
        assert!(matches!(invoke("nope", &request(Role::Investigator)), Err(DriverError::UnknownBuiltin(_))));
        assert!(matches!(invoke("rule_apply", &request(Role::Investigator)), Err(DriverError::Failed { .. })));
    }

    #[test]
    fn hillclimb_refuses_eval_visibility() {
        let dir = rules_workspace();
        let mut req = request(Role::Investigator);
        req.visible_paths = visible_paths(dir.path(), AccessScope::FullVisibleTests, None, None);
        let e = invoke("rule_hillclimb", &req).unwrap_err();
        assert!(e.to_string().contains("eval split"), "{e}");
    }

    #[test]
    fn hillclimb_then_apply() {
        let dir = rules_workspace();
        let mut req = request(Role::Investigator);
        req.visible_paths = visible_paths(dir.path(), AccessScope::TrainOnly, None, Some(Path::new("data/eval.csv")));
        let inv = match invoke("rule_hillclimb", &req).unwrap() {
            DriverResponse::Investigator(p) => p,
            other => panic!("{other:?}"),
        };
        assert!(inv.has_hypothesis && inv.wants_retry_on_reject);
        assert!(inv.report.contains("Train accuracy"));

        let cand = tempfile::tempdir().unwrap();
        let mut ex = request(Role::Executor);
        ex.candidate_dir = Some(cand.path().to_path_buf());
        ex.investigation = Some(inv.clone());
        let out = invoke("rule_apply", &ex).unwrap();
        assert_eq!(
            out,
            DriverResponse::Executor(ExecutorPayload {
                change: inv.hypothesis.clone().unwrap(),
                files: vec![PathBuf::from(rules::RULES_FILE)],
            })
        );
        let written = rules::RuleSet::parse(&fs::read_to_string(cand.path().join(rules::RULES_FILE)).unwrap()).unwrap();
        assert_eq!(serde_json::to_value(&written).unwrap(), inv.proposal.unwrap());
    }

    #[test]
    fn code_ladder_advances_past_tried_steps() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = request(Role::BaselineExecutor);
        b.candidate_dir = Some(dir.path().to_path_buf());
        invoke("ladder_baseline", &b).unwrap();
        let mut req = request(Role::Investigator);
        req.visible_paths = visible_paths(dir.path(), AccessScope::FullVisibleTests, None, None);
        let step_of = |req: &DriverRequest| match invoke("code_ladder", req).unwrap() {
            DriverResponse::Investigator(p) => p.proposal.as_ref().and_then(ladder_step),
            other => panic!("{other:?}"),
        };
        assert_eq!(step_of(&req), Some(1));
        req.history.push(HistoryItem {
            round: 1,
            tries: 0,
            hypothesis: None,
            proposal: Some(serde_json::json!({"step": 4})),
            change: None,
            metrics: None,
            verdict: Verdict::Accept,
        });
        assert_eq!(step_of(&req), None);
    }
}
