//! Canonical command execution: the environment contract for `train_cmd` and
//! `eval_cmd`, snapshot digests, and the per-run metrics cache.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::demos;
use crate::metrics::{canonicalize, parse_metrics, read_metrics, MetricsArtifact, MetricsError};
use crate::subprocess::{self, SubprocessError};

pub const ENV_RUN_DIR: &str = "EPOCH_RUN_DIR";
pub const ENV_ROUND: &str = "EPOCH_ROUND";
pub const ENV_TRY: &str = "EPOCH_TRY";
pub const ENV_PHASE: &str = "EPOCH_PHASE";
pub const ENV_CANDIDATE_DIR: &str = "EPOCH_CANDIDATE_DIR";
pub const ENV_METRICS_OUT: &str = "EPOCH_METRICS_OUT";

pub const DEFAULT_EVAL_TIMEOUT: Duration = Duration::from_secs(3600);

/// Bytes of stdout/stderr kept in memory; full copies go to the log dir.
const CAPTURE_LIMIT: usize = 4096;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty command")]
    EmptyCommand,
    #[error(transparent)]
    Process(#[from] SubprocessError),
    #[error("`{cmd}` exited with {code:?}: {stderr}")]
    Failed {
        cmd: String,
        code: Option<i32>,
        stderr: String,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("builtin evaluator `{name}` failed: {message}")]
    Builtin { name: String, message: String },
    #[error("no evaluator configured")]
    NoEvaluator,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub stdout_path: Option<PathBuf>,
    pub stderr_path: Option<PathBuf>,
}

impl CommandResult {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0)
    }
}

fn truncated(bytes: &[u8]) -> String {
    let cut = bytes.len().min(CAPTURE_LIMIT);
    let mut s = String::from_utf8_lossy(&bytes[..cut]).into_owned();
    if bytes.len() > CAPTURE_LIMIT {
        s.push_str("\n[truncated]");
    }
    s
}

/// Runs a shell command. A nonzero exit is returned as data, not an error.
/// With `log_stem`, full stdout/stderr are written to `<stem>.stdout` and
/// `<stem>.stderr`.
pub fn run_command(
    cmd: &str,
    env: &BTreeMap<String, String>,
    cwd: &Path,
    timeout: Duration,
    log_stem: Option<&Path>,
) -> Result<CommandResult, HarnessError> {
    if cmd.trim().is_empty() {
        return Err(HarnessError::EmptyCommand);
    }
    let mut c = subprocess::shell(cmd);
    c.current_dir(cwd).envs(env);
    let out = subprocess::run(c, None, timeout)?;
    let (stdout_path, stderr_path) = match log_stem {
        Some(stem) => {
            let o = stem.with_extension("stdout");
            let e = stem.with_extension("stderr");
            if let Some(parent) = stem.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&o, &out.stdout).map_err(io_err(&o))?;
            fs::write(&e, &out.stderr).map_err(io_err(&e))?;
            (Some(o), Some(e))
        }
        None => (None, None),
    };
    Ok(CommandResult {
        exit_code: out.code,
        stdout: truncated(&out.stdout),
        stderr: truncated(&out.stderr),
        duration_ms: out.duration.as_millis() as u64,
        stdout_path,
        stderr_path,
    })
}

/// SHA-256 over the sorted relative paths and contents of every regular
/// file below `dir`. Mode bits and the directory's own location are not
/// part of the digest.
pub fn snapshot_digest(dir: &Path) -> io::Result<String> {
    if !dir.is_dir() {
        return Err(io::Error::new(
            io::ErrorKind::NotFound,
            format!("{} is not a directory", dir.display()),
        ));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(dir) {
        let entry = entry.map_err(io::Error::other)?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(dir).expect("walk stays below root");
            let key: Vec<String> = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect();
            files.push((key.join("/"), entry.into_path()));
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = fs::read(&path)?;
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Metrics keyed by snapshot digest, stored as canonical JSON files.
#[derive(Debug, Clone)]
pub struct MetricsCache {
    dir: PathBuf,
}

impl MetricsCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<MetricsArtifact> {
        let bytes = fs::read(self.path(digest)).ok()?;
        parse_metrics(&bytes).ok()
    }

    pub fn put(&self, digest: &str, metrics: &MetricsArtifact) -> io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!("{digest}.json.tmp"));
        fs::write(&tmp, canonicalize(metrics))?;
        fs::rename(tmp, self.path(digest))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Evaluator {
    Builtin(String),
    Command {
        train_cmd: Option<String>,
        eval_cmd: String,
        timeout: Duration,
    },
}

/// Where and for which try an evaluation runs.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub run_dir: PathBuf,
    pub round: u32,
    pub tries: u32,
    pub phase: &'static str,
    pub candidate_dir: PathBuf,
    pub metrics_out: PathBuf,
    pub log_stem: Option<PathBuf>,
}

impl EvalContext {
    pub fn env(&self) -> BTreeMap<String, String> {
        let path = |p: &Path| p.to_string_lossy().into_owned();
        BTreeMap::from([
            (ENV_RUN_DIR.to_string(), path(&self.run_dir)),
            (ENV_ROUND.to_string(), self.round.to_string()),
            (ENV_TRY.to_string(), self.tries.to_string()),
            (ENV_PHASE.to_string(), self.phase.to_string()),
            (ENV_CANDIDATE_DIR.to_string(), path(&self.candidate_dir)),
            (ENV_METRICS_OUT.to_string(), path(&self.metrics_out)),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: MetricsArtifact,
    pub cache_hit: bool,
    /// What the cache held for this digest before the evaluation, if any.
    pub previously_cached: Option<MetricsArtifact>,
}

#[derive(Debug)]
pub struct Harness {
    pub evaluator: Option<Evaluator>,
    pub cache: MetricsCache,
    pub deterministic: bool,
    pub bounded: Vec<String>,
    /// Evaluations actually executed (cache hits excluded).
    pub executions: u64,
}

impl Harness {
    pub fn new(evaluator: Option<Evaluator>, cache: MetricsCache, deterministic: bool, bounded: Vec<String>) -> Self {
        Self {
            evaluator,
            cache,
            deterministic,
            bounded,
            executions: 0,
        }
    }

    fn check(&self, metrics: &MetricsArtifact) -> Result<(), MetricsError> {
        let bounded: Vec<&str> = self.bounded.iter().map(String::as_str).collect();
        metrics.validate(&bounded)
    }

    /// Validates and caches metrics that arrived without execution (replay).
    pub fn accept_supplied(&mut self, digest: &str, metrics: MetricsArtifact) -> Result<Evaluation, HarnessError> {
        self.check(&metrics)?;
        let previously_cached = self.cache.get(digest);
        self.cache.put(digest, &metrics).map_err(io_err(&self.cache.dir))?;
        Ok(Evaluation {
            metrics,
            cache_hit: false,
            previously_cached,
        })
    }

    pub fn evaluate_candidate(&mut self, digest: &str, ctx: &EvalContext) -> Result<Evaluation, HarnessError> {
        let previously_cached = self.cache.get(digest);
        if self.deterministic {
            if let Some(metrics) = &previously_cached {
                return Ok(Evaluation {
                    metrics: metrics.clone(),
                    cache_hit: true,
                    previously_cached,
                });
            }
        }
        let metrics = match self.evaluator.as_ref().ok_or(HarnessError::NoEvaluator)? {
            Evaluator::Builtin(name) => {
                self.executions += 1;
                demos::evaluate_builtin(name, &ctx.candidate_dir).map_err(|message| HarnessError::Builtin {
                    name: name.clone(),
                    message,
                })?
            }
            Evaluator::Command {
                train_cmd,
                eval_cmd,
                timeout,
            } => {
                let env = ctx.env();
                let stem = |kind: &str| ctx.log_stem.as_ref().map(|s| s.with_file_name(format!(
                    "{}_{kind}",
                    s.file_name().unwrap_or_default().to_string_lossy()
                )));
                if let Some(parent) = ctx.metrics_out.parent() {
                    fs::create_dir_all(parent).map_err(io_err(parent))?;
                }
                match fs::remove_file(&ctx.metrics_out) {
                    Ok(()) => {}
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                    Err(e) => return Err(io_err(&ctx.metrics_out)(e)),
                }
                if let Some(train) = train_cmd.as_deref().filter(|c| !c.trim().is_empty()) {
                    let r = run_command(train, &env, &ctx.candidate_dir, *timeout, stem("train").as_deref())?;
                    if !r.success() {
                        return Err(HarnessError::Failed {
                            cmd: train.to_string(),
                            code: r.exit_code,
                            stderr: r.stderr,
                        });
                    }
                }
                self.executions += 1;
                let r = run_command(eval_cmd, &env, &ctx.candidate_dir, *timeout, stem("eval").as_deref())?;
                if !r.success() {
                    return Err(HarnessError::Failed {
                        cmd: eval_cmd.clone(),
                        code: r.exit_code,
                        stderr: r.stderr,
                    });
                }
                read_metrics(&ctx.metrics_out)?
            }
        };
        self.check(&metrics)?;
        self.cache.put(digest, &metrics).map_err(io_err(&self.cache.dir))?;
        Ok(Evaluation {
            metrics,
            cache_hit: false,
            previously_cached,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn command_writes_metrics_and_exits_zero() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.json");
        let env = BTreeMap::from([(ENV_METRICS_OUT.to_string(), out.to_string_lossy().into_owned())]);
        let r = run_command(
            r#"printf '{"schema_version":1,"splits":{"eval":{"accuracy":0.5}}}' > "$EPOCH_METRICS_OUT""#,
            &env,
            dir.path(),
            Duration::from_secs(5),
            None,
        )
        .unwrap();
        assert_eq!(r.exit_code, Some(0));
        assert_eq!(read_metrics(&out).unwrap().split_value("eval", "accuracy"), Some(0.5));
    }

    #[test]
    fn exit_code_is_data_and_timeout_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let env = BTreeMap::new();
        let r = run_command("exit 3", &env, dir.path(), Duration::from_secs(5), None).unwrap();
        assert_eq!(r.exit_code, Some(3));
        let err = run_command("sleep 10", &env, dir.path(), Duration::from_millis(150), None).unwrap_err();
        assert!(matches!(err, HarnessError::Process(SubprocessError::Timeout { .. })));
        assert!(matches!(
            run_command("  ", &env, dir.path(), Duration::from_secs(1), None),
            Err(HarnessError::EmptyCommand)
        ));
    }

    #[test]
    fn full_output_goes_to_log_files() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("logs/eval");
        let r = run_command("head -c 10000 /dev/zero | tr '\\0' x", &BTreeMap::new(), dir.path(), Duration::from_secs(5), Some(&stem)).unwrap();
        assert!(r.stdout.ends_with("[truncated]"));
        assert_eq!(fs::read(r.stdout_path.unwrap()).unwrap().len(), 10000);
    }

    #[test]
    fn empty_directory_digest_is_sha256_of_nothing() {
        let dir = tempfile::tempdir().unwrap();
        // independent oracle: the well-known SHA-256 of the empty string
        assert_eq!(
            snapshot_digest(dir.path()).unwrap(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_is_location_independent_and_content_sensitive() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for root in [a.path(), b.path()] {
            fs::create_dir_all(root.join("src/x")).unwrap();
            fs::write(root.join("src/x/f.txt"), "hello").unwrap();
            fs::write(root.join("rules.json"), "[]").unwrap();
        }
        let da = snapshot_digest(a.path()).unwrap();
        assert_eq!(da, snapshot_digest(b.path()).unwrap());
        fs::write(b.path().join("src/x/f.txt"), "hellp").unwrap();
        assert_ne!(da, snapshot_digest(b.path()).unwrap());
        assert!(snapshot_digest(&a.path().join("missing")).is_err());
    }

    fn ctx(dir: &Path) -> EvalContext {
        EvalContext {
            run_dir: dir.to_path_buf(),
            round: 1,
            tries: 0,
            phase: "phase2",
            candidate_dir: dir.join("cand"),
            metrics_out: dir.join("out/metrics.json"),
            log_stem: None,
        }
    }

    #[test]
    fn deterministic_mode_hits_the_cache() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cand")).unwrap();
        let eval = Evaluator::Command {
            train_cmd: Some("true".into()),
            eval_cmd: r#"printf '{"splits":{"eval":{"accuracy":0.25}}}' > "$EPOCH_METRICS_OUT""#.into(),
            timeout: Duration::from_secs(5),
        };
        let mut h = Harness::new(Some(eval.clone()), MetricsCache::new(dir.path().join("cache")), true, vec![]);
        let first = h.evaluate_candidate("d1", &ctx(dir.path())).unwrap();
        assert!(!first.cache_hit);
        let again = h.evaluate_candidate("d1", &ctx(dir.path())).unwrap();
        assert!(again.cache_hit);
        assert_eq!(again.metrics, first.metrics);
        assert_eq!(h.executions, 1);

        let mut nd = Harness::new(Some(eval), MetricsCache::new(dir.path().join("cache")), false, vec![]);
        nd.evaluate_candidate("d1", &ctx(dir.path())).unwrap();
        nd.evaluate_candidate("d1", &ctx(dir.path())).unwrap();
        assert_eq!(nd.executions, 2);
    }

    #[test]
    fn missing_metrics_file_and_failing_eval() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cand")).unwrap();
        let cache = MetricsCache::new(dir.path().join("cache"));
        let quiet = Evaluator::Command { train_cmd: None, eval_cmd: "true".into(), timeout: Duration::from_secs(5) };
        let mut h = Harness::new(Some(quiet), cache.clone(), false, vec![]);
        let err = h.evaluate_candidate("d", &ctx(dir.path())).unwrap_err();
        assert!(matches!(err, HarnessError::Metrics(MetricsError::Missing(_))), "{err}");
        let failing = Evaluator::Command { train_cmd: None, eval_cmd: "echo boom >&2; exit 2".into(), timeout: Duration::from_secs(5) };
        let mut h = Harness::new(Some(failing), cache, false, vec![]);
        match h.evaluate_candidate("d", &ctx(dir.path())).unwrap_err() {
            HarnessError::Failed { code, stderr, .. } => {
                assert_eq!(code, Some(2));
                assert_eq!(stderr.trim(), "boom");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn env_contract_is_injected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cand")).unwrap();
        let eval = Evaluator::Command {
            train_cmd: None,
            eval_cmd: r#"printf '{"splits":{"eval":{"r":%s,"t":%s}},"notes":"%s %s"}' "$EPOCH_ROUND" "$EPOCH_TRY" "$EPOCH_PHASE" "$(basename "$EPOCH_CANDIDATE_DIR")" > "$EPOCH_METRICS_OUT""#.into(),
            timeout: Duration::from_secs(5),
        };
        let mut h = Harness::new(Some(eval), MetricsCache::new(dir.path().join("cache")), false, vec![]);
        let mut c = ctx(dir.path());
        c.round = 3;
        c.tries = 1;
        let m = h.evaluate_candidate("d", &c).unwrap().metrics;
        assert_eq!(m.split_value("eval", "r"), Some(3.0));
        assert_eq!(m.split_value("eval", "t"), Some(1.0));
        assert_eq!(m.notes.as_deref(), Some("phase2 cand"));
    }

    #[test]
    fn bounded_metrics_out_of_range_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut h = Harness::new(None, MetricsCache::new(dir.path().join("cache")), false, vec!["accuracy".into()]);
        let bad = MetricsArtifact::default().with_split("eval", "accuracy", 1.5);
        assert!(h.accept_supplied("d", bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn deterministic_executions_bounded_by_distinct_digests(
            digests in prop::collection::vec(0u8..5, 1..20),
        ) {
            let dir = tempfile::tempdir().unwrap();
            fs::create_dir_all(dir.path().join("cand/rules")).unwrap();
            fs::write(dir.path().join("cand/rules/rules.json"), crate::demos::rules::BASELINE_RULES).unwrap();
            let mut h = Harness::new(Some(Evaluator::Builtin("rules".into())), MetricsCache::new(dir.path().join("cache")), true, vec![]);
            for d in &digests {
                h.evaluate_candidate(&format!("d{d}"), &ctx(dir.path())).unwrap();
            }
            let distinct: std::collections::BTreeSet<_> = digests.iter().collect();
            prop_assert!(h.executions <= distinct.len() as u64);
        }
    }
}
