//! `epoch`: validate task specs, run and resume optimization runs, replay
//! recorded traces and render run reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epoch_core::engine::{self, EngineError, RunOptions, RunOutcome};
use epoch_core::spec::{parse_spec, validate_spec};
use epoch_core::tracking::{render_summary, verdict_lines, StoreError, Summary};
use serde_json::json;

const OK: u8 = 0;
const RUN_ERROR: u8 = 1;
const SPEC_INVALID: u8 = 2;
const ARTIFACT_ERROR: u8 = 3;
const USAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "epoch", version, about = "Round-based optimization runs with reviewed, tracked changes")]
struct Cli {
    /// Root holding `projects/` (defaults to the current directory)
    #[arg(long, global = true, env = "EPOCH_HOME")]
    workspace: Option<PathBuf>,
    /// Print machine-readable JSON instead of text
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a task spec and list its violations
    Validate { spec: PathBuf },
    /// Start a run and drive it to termination
    Run {
        spec: PathBuf,
        #[command(flatten)]
        opts: Overrides,
        /// Run identifier (defaults to a UTC timestamp)
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Continue an interrupted run
    Resume { run_dir: PathBuf },
    /// Run a spec with every role replaying a recorded trace
    Replay {
        spec: PathBuf,
        trace: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Regenerate and print a run's summary table
    Report { run_dir: PathBuf },
}

#[derive(Args)]
struct Overrides {
    /// Override run.max_rounds
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    max_rounds: Option<u32>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn spec_code(e: &EngineError) -> u8 {
    match e {
        EngineError::Spec(_) | EngineError::Invalid(_) | EngineError::Trace(_) => SPEC_INVALID,
        _ => RUN_ERROR,
    }
}

fn artifact_code(e: &EngineError) -> u8 {
    match e {
        EngineError::Store(StoreError::Interrupted(_)) => RUN_ERROR,
        EngineError::Store(_) | EngineError::Spec(_) => ARTIFACT_ERROR,
        EngineError::Trace(_) => SPEC_INVALID,
        _ => RUN_ERROR,
    }
}

fn fail(code: fn(&EngineError) -> u8) -> impl Fn(EngineError) -> Failure {
    move |e| Failure::new(code(&e), e.to_string())
}

fn read_spec(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::new(USAGE, format!("cannot read {}: {e}", path.display())))
}

fn existing_dir(path: &Path) -> Result<PathBuf, Failure> {
    path.canonicalize()
        .map_err(|e| Failure::new(ARTIFACT_ERROR, format!("cannot open {}: {e}", path.display())))
}

fn summary_json(summary: &Summary, run_dir: &Path) -> serde_json::Value {
    json!({ "run_dir": run_dir, "summary": summary })
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn print_outcome(out: &RunOutcome, as_json: bool) {
    if as_json {
        let mut v = summary_json(&out.summary, &out.run_dir);
        v["summary_path"] = json!(out.summary_path);
        print_json(&v);
    } else {
        println!("{}", out.summary_path.display());
    }
}

fn validate(path: &Path, as_json: bool) -> Result<(), Failure> {
    let text = read_spec(path)?;
    let violations: Vec<(String, String)> = match parse_spec(&text) {
        Ok(spec) => validate_spec(&spec)
            .into_iter()
            .map(|v| (v.path.clone(), v.message.clone()))
            .collect(),
        Err(e) => vec![(e.path().unwrap_or("").to_string(), e.to_string())],
    };
    if as_json {
        let list: Vec<_> = violations.iter().map(|(p, m)| json!({ "path": p, "message": m })).collect();
        print_json(&json!({ "valid": violations.is_empty(), "violations": list }));
    } else if violations.is_empty() {
        println!("{}: ok", path.display());
    } else {
        for (p, m) in &violations {
            println!("{p}: {m}");
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(SPEC_INVALID, format!("{} violation(s)", violations.len())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { OK });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::from(OK),
        Err(f) => {
            eprintln!("epoch: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let workspace = cli.workspace.clone().unwrap_or_else(|| PathBuf::from("."));
    let as_json = cli.json;
    match cli.command {
        Command::Validate { spec } => validate(&spec, as_json),
        Command::Run { spec, opts, run_id } => {
            read_spec(&spec)?;
            let (task, text) = engine::load_spec(&spec, opts.max_rounds, None).map_err(fail(spec_code))?;
            let run_opts = RunOptions {
                run_id,
                max_rounds: opts.max_rounds,
                ..Default::default()
            };
            let out = engine::run(&workspace, task, &text, &run_opts).map_err(fail(spec_code))?;
            print_outcome(&out, as_json);
            Ok(())
        }
        Command::Resume { run_dir } => {
            let run_dir = existing_dir(&run_dir)?;
            let out = engine::resume(&run_dir, None).map_err(fail(artifact_code))?;
            print_outcome(&out, as_json);
            Ok(())
        }
        Command::Replay { spec, trace, opts } => {
            read_spec(&spec)?;
            let (task, text) =
                engine::load_spec(&spec, opts.max_rounds, Some(&trace)).map_err(fail(spec_code))?;
            let scratch;
            let root = match &cli.workspace {
                Some(w) => w.clone(),
                None => {
                    scratch = tempfile::tempdir()
                        .map_err(|e| Failure::new(RUN_ERROR, format!("cannot create a scratch workspace: {e}")))?;
                    scratch.path().to_path_buf()
                }
            };
            let run_opts = RunOptions {
                max_rounds: opts.max_rounds,
                replay: Some(trace),
                ..Default::default()
            };
            let out = engine::run(&root, task, &text, &run_opts).map_err(fail(spec_code))?;
            let lines = verdict_lines(&out.loaded, &out.policy);
            if as_json {
                let mut v = summary_json(&out.summary, &out.run_dir);
                v["verdicts"] = json!(lines);
                print_json(&v);
            } else {
                for l in lines {
                    println!("{l}");
                }
            }
            Ok(())
        }
        Command::Report { run_dir } => {
            let run_dir = existing_dir(&run_dir)?;
            let (summary, _, _) = engine::report(&run_dir).map_err(|e| Failure::new(ARTIFACT_ERROR, e.to_string()))?;
            if as_json {
                print_json(&summary_json(&summary, &run_dir));
            } else {
                print!("{}", render_summary(&summary));
            }
            Ok(())
        }
    }
}
