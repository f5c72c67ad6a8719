//! The metrics artifact contract shared by evaluation commands, builtin
//! evaluators, replay traces and the round store.
//!
//! Every artifact that lands on disk goes through [`canonicalize`], so two
//! equal artifacts always produce the same bytes and a committed file can be
//! compared byte-for-byte across runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation produced no metrics file at {0}")]
    Missing(PathBuf),
    #[error("failed to read metrics file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("non-finite number at `{0}`")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestCounts {
    pub passed: u32,
    pub total: u32,
}

impl TestCounts {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            f64::from(self.passed) / f64::from(self.total)
        }
    }

    pub fn all_pass(&self) -> bool {
        self.passed == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsArtifact {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub splits: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tests: Option<TestCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

impl Default for MetricsArtifact {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            splits: BTreeMap::new(),
            tests: None,
            timings_ms: None,
            notes: None,
        }
    }
}

impl MetricsArtifact {
    pub fn with_split(mut self, split: &str, metric: &str, value: f64) -> Self {
        self.splits
            .entry(split.to_string())
            .or_default()
            .insert(metric.to_string(), value);
        self
    }

    pub fn with_tests(mut self, passed: u32, total: u32) -> Self {
        self.tests = Some(TestCounts { passed, total });
        self
    }

    pub fn with_timing(mut self, name: &str, ms: f64) -> Self {
        self.timings_ms
            .get_or_insert_with(BTreeMap::new)
            .insert(name.to_string(), ms);
        self
    }

    pub fn split_value(&self, split: &str, metric: &str) -> Option<f64> {
        self.splits.get(split)?.get(metric).copied()
    }

    pub fn timing(&self, name: &str) -> Option<f64> {
        self.timings_ms.as_ref()?.get(name).copied()
    }

    /// Checks the structural invariants. `bounded` names metrics that must
    /// lie in `[0, 1]` wherever they appear in a split.
    pub fn validate(&self, bounded: &[&str]) -> Result<(), MetricsError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(MetricsError::Schema {
                path: "schema_version".into(),
                message: format!(
                    "unsupported schema version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            });
        }
        for (split, metrics) in &self.splits {
            for (name, value) in metrics {
                let path = format!("splits.{split}.{name}");
                if !value.is_finite() {
                    return Err(MetricsError::NonFinite(path));
                }
                if bounded.contains(&name.as_str()) && !(0.0..=1.0).contains(value) {
                    return Err(MetricsError::Schema {
                        path,
                        message: format!("bounded metric out of [0, 1]: {value}"),
                    });
                }
            }
        }
        if let Some(tests) = &self.tests {
            if tests.passed > tests.total {
                return Err(MetricsError::Schema {
                    path: "tests.passed".into(),
                    message: format!("passed {} exceeds total {}", tests.passed, tests.total),
                });
            }
        }
        if let Some(timings) = &self.timings_ms {
            for (name, value) in timings {
                let path = format!("timings_ms.{name}");
                if !value.is_finite() {
                    return Err(MetricsError::NonFinite(path));
                }
                if *value < 0.0 {
                    return Err(MetricsError::Schema {
                        path,
                        message: format!("negative timing {value}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Drops every split except the ones listed. Used to hide held-out
    /// numbers from roles restricted to training-side evidence.
    pub fn restricted_to(&self, keep: impl Fn(&str) -> bool) -> MetricsArtifact {
        let mut out = self.clone();
        out.splits.retain(|split, _| keep(split));
        out
    }
}

/// Parses and invariant-checks a metrics document.
pub fn parse_metrics(bytes: &[u8]) -> Result<MetricsArtifact, MetricsError> {
    // NaN and infinities are not valid JSON numbers, so the only way they can
    // reach us is as strings or out-of-range literals; both fail here.
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let artifact: MetricsArtifact =
        serde_path_to_error::deserialize(&mut de).map_err(|e| MetricsError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    de.end().map_err(|e| MetricsError::Schema {
        path: ".".into(),
        message: e.to_string(),
    })?;
    artifact.validate(&[])?;
    Ok(artifact)
}

pub fn read_metrics(path: &Path) -> Result<MetricsArtifact, MetricsError> {
    let bytes = match fs::read(path) {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(MetricsError::Missing(path.to_path_buf()))
        }
        Err(source) => {
            return Err(MetricsError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    parse_metrics(&bytes)
}

/// Deterministic byte encoding of any serializable value: object keys sorted,
/// shortest round-trip decimals, no whitespace, `-0.0` folded into `0.0`.
pub fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut value = serde_json::to_value(value).expect("value serializes to JSON");
    normalize_zero(&mut value);
    // serde_json's default map is ordered by key, which gives the sorting.
    serde_json::to_vec(&value).expect("JSON value serializes")
}

fn normalize_zero(value: &mut Value) {
    match value {
        Value::Number(n) => {
            if n.as_f64() == Some(0.0) && n.is_f64() {
                *n = serde_json::Number::from_f64(0.0).expect("zero is finite");
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize_zero),
        Value::Object(map) => map.values_mut().for_each(normalize_zero),
        _ => {}
    }
}

pub fn canonicalize(artifact: &MetricsArtifact) -> Vec<u8> {
    canonical_json(artifact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_mnist_retry_round() {
        let a = parse_metrics(br#"{"schema_version":1,"splits":{"train":{"accuracy":0.7050},"eval":{"accuracy":0.6667}}}"#)
            .unwrap();
        assert_eq!(a.split_value("eval", "accuracy"), Some(0.6667));
        assert_eq!(a.split_value("train", "accuracy"), Some(0.705));
    }

    #[test]
    fn parses_fibonacci_round() {
        let a = parse_metrics(
            br#"{"schema_version":1,"splits":{},"tests":{"passed":19,"total":19},"timings_ms":{"fib_1e6":34.3}}"#,
        )
        .unwrap();
        assert_eq!(a.tests, Some(TestCounts { passed: 19, total: 19 }));
        assert_eq!(a.timing("fib_1e6"), Some(34.3));
    }

    #[test]
    fn rejects_nan_and_garbage() {
        assert!(matches!(
            parse_metrics(br#"{"schema_version":1,"splits":{"eval":{"accuracy":NaN}}}"#),
            Err(MetricsError::Schema { .. })
        ));
        assert!(matches!(
            parse_metrics(br#"{"schema_version":1,"splits":{"eval":{"accuracy":"NaN"}}}"#),
            Err(MetricsError::Schema { .. })
        ));
        // 1e400 overflows to infinity in the parser and is refused there.
        assert!(parse_metrics(br#"{"schema_version":1,"splits":{"eval":{"accuracy":1e400}}}"#).is_err());
        assert!(matches!(
            parse_metrics(br#"{"schema_version":1,"tests":{"passed":20,"total":19}}"#),
            Err(MetricsError::Schema { .. })
        ));
        assert!(matches!(
            parse_metrics(br#"{"schema_version":2}"#),
            Err(MetricsError::Schema { .. })
        ));
        assert!(matches!(
            parse_metrics(br#"{"schema_version":1,"extra":true}"#),
            Err(MetricsError::Schema { .. })
        ));
    }

    #[test]
    fn nan_constructed_in_memory_fails_validation() {
        let a = MetricsArtifact::default().with_split("eval", "accuracy", f64::NAN);
        assert!(matches!(a.validate(&[]), Err(MetricsError::NonFinite(p)) if p == "splits.eval.accuracy"));
    }

    #[test]
    fn bounded_metrics_are_range_checked() {
        let a = MetricsArtifact::default().with_split("eval", "accuracy", 1.2);
        assert!(a.validate(&[]).is_ok());
        assert!(a.validate(&["accuracy"]).is_err());
    }

    #[test]
    fn missing_file_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_metrics(&dir.path().join("nope.json")).unwrap_err();
        assert!(matches!(err, MetricsError::Missing(_)));
    }

    #[test]
    fn key_order_and_number_spelling_do_not_matter() {
        let a = parse_metrics(br#"{"splits":{"train":{"a":0.50,"b":1}},"schema_version":1}"#).unwrap();
        let b = parse_metrics(br#"{"schema_version":1,"splits":{"train":{"b":1.0,"a":0.5}}}"#).unwrap();
        assert_eq!(canonicalize(&a), canonicalize(&b));
        assert_eq!(
            String::from_utf8(canonicalize(&a)).unwrap(),
            r#"{"schema_version":1,"splits":{"train":{"a":0.5,"b":1.0}}}"#
        );
    }

    #[test]
    fn negative_zero_is_folded() {
        let a = MetricsArtifact::default().with_split("eval", "x", -0.0);
        let b = MetricsArtifact::default().with_split("eval", "x", 0.0);
        assert_eq!(a, b);
        assert_eq!(canonicalize(&a), canonicalize(&b));
    }

    fn name() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["accuracy", "f1", "loss", "acc", "fib_1e5", "fib_1e6"])
            .prop_map(str::to_string)
    }

    fn value() -> impl Strategy<Value = f64> {
        prop_oneof![
            (0u32..10_000).prop_map(|v| f64::from(v) / 10_000.0),
            -1e6f64..1e6,
            prop::num::f64::NORMAL,
        ]
    }

    pub(crate) fn artifact() -> impl Strategy<Value = MetricsArtifact> {
        let split = prop::collection::btree_map(name(), value(), 0..4);
        (
            prop::collection::btree_map(
                prop::sample::select(vec!["train", "eval", "test"]).prop_map(str::to_string),
                split,
                0..3,
            ),
            prop::option::of((0u32..30, 0u32..30).prop_map(|(a, b)| TestCounts {
                passed: a.min(b),
                total: a.max(b),
            })),
            prop::option::of(prop::collection::btree_map(name(), 0.0f64..1e5, 0..3)),
            prop::option::of("[a-z ]{0,12}"),
        )
            .prop_map(|(splits, tests, timings_ms, notes)| MetricsArtifact {
                schema_version: SCHEMA_VERSION,
                splits,
                tests,
                timings_ms,
                notes,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn canonical_bytes_are_injective(a in artifact(), b in artifact()) {
            prop_assert_eq!(canonicalize(&a) == canonicalize(&b), a == b);
        }

        #[test]
        fn canonical_form_reparses_to_the_same_artifact(a in artifact()) {
            let bytes = canonicalize(&a);
            let back = parse_metrics(&bytes).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(canonicalize(&back), bytes);
        }

        #[test]
        fn perturbed_values_change_bytes(a in artifact(), delta in 1e-9f64..1.0) {
            let mut b = a.clone();
            let hit = b.splits.values_mut().flat_map(|m| m.values_mut()).next();
            if let Some(v) = hit {
                let before = *v;
                *v += delta.max(before.abs() * 1e-12);
                prop_assume!(*v != before);
                prop_assert_ne!(canonicalize(&a), canonicalize(&b));
            }
        }
    }
}
