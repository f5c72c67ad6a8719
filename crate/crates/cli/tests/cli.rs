use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demos() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demos")
}

fn epoch(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epoch"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("EPOCH_HOME")
        .output()
        .expect("epoch runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn path_of(demo: &str) -> String {
    demos().join(demo).to_string_lossy().into_owned()
}

fn run_demo(ws: &Path, spec: &str, run_id: &str) -> PathBuf {
    let o = epoch(ws, &["run", &path_of(spec), "--run-id", run_id]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = PathBuf::from(stdout(&o).trim());
    assert!(summary.ends_with("run_summary.md"), "{summary:?}");
    summary.parent().unwrap().to_path_buf()
}

#[test]
fn replay_output_matches_golden_files() {
    let ws = tempfile::tempdir().unwrap();
    for name in ["fibonacci", "mnist", "sst2", "iris", "synth_high_gap"] {
        let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/{name}.txt"))).unwrap();
        let spec = path_of(&format!("replay/{name}.yaml"));
        let trace = path_of(&format!("replay/{name}.json"));
        let o = epoch(ws.path(), &["replay", &spec, &trace]);
        assert_eq!(code(&o), 0, "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(stdout(&o), golden, "{name}");
    }
}

#[test]
fn replay_without_workspace_leaves_no_files() {
    let cwd = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_epoch"))
        .current_dir(cwd.path())
        .env_remove("EPOCH_HOME")
        .args(["replay", &path_of("replay/iris.yaml"), &path_of("replay/iris.json")])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(cwd.path()).unwrap().count(), 0);
}

#[test]
fn replay_json_lists_verdicts() {
    let ws = tempfile::tempdir().unwrap();
    let o = epoch(ws.path(), &["--json", "replay", &path_of("replay/sst2.yaml"), &path_of("replay/sst2.json")]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["verdicts"].as_array().unwrap().len(), 4);
    assert_eq!(v["summary"]["termination"]["reason"], "saturated");
}

#[test]
fn bad_trace_is_a_spec_error() {
    let ws = tempfile::tempdir().unwrap();
    let trace = ws.path().join("t.json");
    fs::write(&trace, r#"[{"round": 0, "try": 0, "metrics": {"splits": {"eval": {"accuracy": "high"}}}}]"#).unwrap();
    let o = epoch(ws.path(), &["replay", &path_of("replay/iris.yaml"), trace.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_exit_codes() {
    let ws = tempfile::tempdir().unwrap();
    for spec in ["iris_rules_run.yaml", "synth_tuning_run.yaml", "code_ladder_run.yaml", "replay/mnist.yaml"] {
        let o = epoch(ws.path(), &["validate", &path_of(spec)]);
        assert_eq!(code(&o), 0, "{spec}: {}", stdout(&o));
    }
    let bad = ws.path().join("bad.yaml");
    let text = fs::read_to_string(demos().join("iris_rules_run.yaml")).unwrap();
    fs::write(&bad, text.replace("max_rounds: 4", "max_rounds: 0")).unwrap();
    let o = epoch(ws.path(), &["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("run.max_rounds"), "{}", stdout(&o));
    let missing = ws.path().join("nope.yaml");
    assert_eq!(code(&epoch(ws.path(), &["validate", missing.to_str().unwrap()])), 4);
}

#[test]
fn usage_errors_exit_4() {
    let ws = tempfile::tempdir().unwrap();
    assert_eq!(code(&epoch(ws.path(), &["frobnicate"])), 4);
    assert_eq!(code(&epoch(ws.path(), &["run"])), 4);
    assert_eq!(code(&epoch(ws.path(), &["run", &path_of("iris_rules_run.yaml"), "--max-rounds", "0"])), 4);
    assert_eq!(code(&epoch(ws.path(), &["--help"])), 0);
}

#[test]
fn run_then_report_twice() {
    let ws = tempfile::tempdir().unwrap();
    let run_dir = run_demo(ws.path(), "iris_rules_run.yaml", "r1");
    assert!(run_dir.join("run_summary.md").exists());
    assert!(ws.path().join("projects/iris_rules_run.yaml").exists());
    let a = epoch(ws.path(), &["report", run_dir.to_str().unwrap()]);
    let b = epoch(ws.path(), &["report", run_dir.to_str().unwrap()]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stdout(&a), fs::read_to_string(run_dir.join("run_summary.md")).unwrap());
    assert!(stdout(&a).contains("| Round | Key change | Metrics | Verdict |"));
}

#[test]
fn max_rounds_override_is_recorded() {
    let ws = tempfile::tempdir().unwrap();
    let o = epoch(ws.path(), &["--json", "run", &path_of("iris_rules_run.yaml"), "--max-rounds", "2", "--run-id", "short"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["summary"]["termination"]["reason"], "budget_exhausted");
    let internal = ws.path().join("projects/iris_rules/.epoch/short");
    let overrides = fs::read_to_string(internal.join("overrides.json")).unwrap();
    assert!(overrides.contains("\"run.max_rounds\":2"), "{overrides}");
    assert!(fs::read_to_string(internal.join("effective_spec.yaml")).unwrap().contains("max_rounds: 2"));
}

#[test]
fn epoch_home_sets_the_workspace() {
    let ws = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_epoch"))
        .env("EPOCH_HOME", ws.path())
        .args(["run", &path_of("code_ladder_run.yaml"), "--run-id", "h"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ws.path().join("projects/fib_ladder/h/run_summary.md").exists());
    assert!(ws.path().join("projects/fib_ladder/src/fib.py").exists());
}

#[test]
fn resume_and_report_errors() {
    let ws = tempfile::tempdir().unwrap();
    let run_dir = run_demo(ws.path(), "iris_rules_run.yaml", "r1");
    // already done: no-op
    let before = fs::read(run_dir.join("run_summary.md")).unwrap();
    assert_eq!(code(&epoch(ws.path(), &["resume", run_dir.to_str().unwrap()])), 0);
    assert_eq!(fs::read(run_dir.join("run_summary.md")).unwrap(), before);

    let delta = run_dir.join("delta_round_2.json");
    let bytes = fs::read(&delta).unwrap();
    fs::write(&delta, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&epoch(ws.path(), &["resume", run_dir.to_str().unwrap()])), 3);
    assert_eq!(code(&epoch(ws.path(), &["report", run_dir.to_str().unwrap()])), 3);

    let empty = ws.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&epoch(ws.path(), &["report", empty.to_str().unwrap()])), 3);
    assert_eq!(code(&epoch(ws.path(), &["resume", ws.path().join("missing").to_str().unwrap()])), 3);
}

#[test]
fn failing_baseline_evaluation_is_a_run_error() {
    let ws = tempfile::tempdir().unwrap();
    let spec = ws.path().join("fail.yaml");
    let text = fs::read_to_string(demos().join("iris_rules_run.yaml")).unwrap();
    let text = text
        .replace("  evaluator: {kind: builtin, name: rules}\n", "")
        .replace("eval_cmd: null", "eval_cmd: \"exit 3\"");
    fs::write(&spec, text).unwrap();
    let o = epoch(ws.path(), &["run", spec.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn baseline_only_run_succeeds() {
    let ws = tempfile::tempdir().unwrap();
    let spec = ws.path().join("base.yaml");
    let text = fs::read_to_string(demos().join("synth_tuning_run.yaml")).unwrap();
    fs::write(&spec, text.replace("multi_round_optimization: true", "multi_round_optimization: false")).unwrap();
    let o = epoch(ws.path(), &["--json", "run", spec.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["summary"]["rows"].as_array().unwrap().len(), 1);
}

const COUNTER_SPEC: &str = r#"
project: {name: "Counter", slug: "counter"}
run: {goal: "raise the counter", task_type: "custom", max_rounds: 6, max_retries_per_round: 0}
phases: {baseline_construction: false}
investigation: {access_scope: "full_visible_tests"}
evaluation:
  primary_metric: "score"
  min_delta: 0.05
  eval_cmd: "printf '{\"schema_version\":1,\"splits\":{\"eval\":{\"score\":0.%s}},\"notes\":\"%s %s\"}' \"$(cat \"$EPOCH_CANDIDATE_DIR/src/value.txt\")\" \"$EPOCH_PHASE\" \"$EPOCH_TRY\" > \"$EPOCH_METRICS_OUT\""
drivers:
  investigator:
    kind: command
    argv:
      - python3
      - -c
      - |
        import json, sys
        req = json.load(sys.stdin)
        path = [p for p in req["visible_paths"] if p.endswith("src/value.txt")][0]
        v = int(open(path).read())
        if v >= 3:
            out = {"report": "counter at %d" % v, "has_hypothesis": False}
        else:
            out = {"report": "counter at %d" % v, "hypothesis": "increment", "has_hypothesis": True}
        print(json.dumps({"role": req["role"], "payload": out}))
  executor:
    kind: command
    argv:
      - python3
      - -c
      - |
        import json, os, sys
        req = json.load(sys.stdin)
        p = os.path.join(req["candidate_dir"], "src", "value.txt")
        v = int(open(p).read()) + 1
        open(p, "w").write(str(v))
        print(json.dumps({"role": "executor", "payload": {"change": "value %d" % v, "files": ["src/value.txt"]}}))
"#;

#[test]
fn command_drivers_and_eval_cmd_end_to_end() {
    let ws = tempfile::tempdir().unwrap();
    let src = ws.path().join("projects/counter/src");
    fs::create_dir_all(&src).unwrap();
    fs::write(src.join("value.txt"), "0").unwrap();
    let spec = ws.path().join("counter.yaml");
    fs::write(&spec, COUNTER_SPEC).unwrap();
    let o = epoch(ws.path(), &["--json", "run", spec.to_str().unwrap(), "--run-id", "c"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["summary"]["final_value"], 0.3);
    assert_eq!(v["summary"]["termination"]["reason"], "no_hypothesis");
    assert_eq!(fs::read_to_string(src.join("value.txt")).unwrap(), "3");
    let m = fs::read_to_string(ws.path().join("projects/counter/c/proposed_metrics_round_3.json")).unwrap();
    assert!(m.contains("\"notes\":\"phase2 0\""), "{m}");
    let b = fs::read_to_string(ws.path().join("projects/counter/c/baseline_metrics.json")).unwrap();
    assert!(b.contains("phase1"), "{b}");
}
