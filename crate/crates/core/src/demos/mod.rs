//! Self-contained demo tasks: a rule-set classifier, a synthetic
//! hyperparameter surface and a recorded code-optimization ladder.

pub mod ladder;
pub mod rules;
pub mod synth;

use std::fs;
use std::io;
use std::path::Path;

use crate::metrics::MetricsArtifact;

pub const EVALUATORS: [&str; 3] = ["rules", "synth", "ladder"];

/// Data sources the engine can materialize without touching disk.
pub const IRIS_SOURCE: &str = "builtin:iris";

pub fn evaluate_builtin(name: &str, candidate: &Path) -> Result<MetricsArtifact, String> {
    let read = |rel: &str| {
        let p = candidate.join(rel);
        fs::read_to_string(&p).map_err(|e| format!("cannot read {}: {e}", p.display()))
    };
    match name {
        "rules" => rules::eval_rules(&rules::RuleSet::parse(&read(rules::RULES_FILE)?)?),
        "synth" => synth::eval_params(&synth::Params::parse(&read(synth::PARAMS_FILE)?)?),
        "ladder" => ladder::metrics(ladder::read_step(candidate)?),
        other => Err(format!("unknown builtin evaluator `{other}`")),
    }
}

/// Writes the train and eval splits of a builtin data source into `dest`.
/// Returns false when `source` is not a builtin source.
pub fn materialize_builtin(source: &str, dest: &Path) -> io::Result<bool> {
    if source != IRIS_SOURCE {
        return Ok(false);
    }
    let d = rules::iris();
    fs::create_dir_all(dest)?;
    fs::write(dest.join("train.csv"), d.train.to_csv())?;
    fs::write(dest.join("eval.csv"), d.eval.to_csv())?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_evaluators_read_their_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path();
        fs::create_dir_all(c.join("rules")).unwrap();
        fs::create_dir_all(c.join("src")).unwrap();
        fs::write(c.join(rules::RULES_FILE), rules::BASELINE_RULES).unwrap();
        fs::write(c.join(synth::PARAMS_FILE), synth::BASELINE_PARAMS).unwrap();
        fs::write(c.join(ladder::SOURCE_FILE), ladder::source(0).unwrap()).unwrap();
        for name in EVALUATORS {
            evaluate_builtin(name, c).unwrap();
        }
        assert!(evaluate_builtin("nope", c).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(evaluate_builtin("rules", empty.path()).unwrap_err().contains("cannot read"));
    }

    #[test]
    fn iris_materializes_two_splits() {
        let dir = tempfile::tempdir().unwrap();
        assert!(materialize_builtin(IRIS_SOURCE, dir.path()).unwrap());
        let train = rules::Table::parse_csv(&fs::read_to_string(dir.path().join("train.csv")).unwrap()).unwrap();
        assert_eq!(train.rows.len(), 105);
        assert!(!materialize_builtin("data/iris.csv", dir.path()).unwrap());
    }
}
