//! Child processes with captured output and a wall-clock deadline.
//!
//! Each child runs in its own process group so a timeout kills the whole
//! tree (a shell plus whatever it started), not just the direct child.

use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubprocessError {
    #[error("failed to spawn `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("`{program}` timed out after {timeout:?}")]
    Timeout { program: String, timeout: Duration },
    #[error("waiting on `{program}` failed: {source}")]
    Wait {
        program: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Output {
    /// `None` when the child was killed by a signal.
    pub code: Option<i32>,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration: Duration,
}

const POLL: Duration = Duration::from_millis(5);

fn drain<R: Read + Send + 'static>(mut r: R) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = r.read_to_end(&mut buf);
        buf
    })
}

/// Runs `cmd` to completion or until `timeout` elapses. Stdout and stderr
/// are always piped; `stdin` is written then closed.
pub fn run(mut cmd: Command, stdin: Option<Vec<u8>>, timeout: Duration) -> Result<Output, SubprocessError> {
    let program = cmd.get_program().to_string_lossy().into_owned();
    cmd.stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    let start = Instant::now();
    let mut child = cmd.spawn().map_err(|source| SubprocessError::Spawn {
        program: program.clone(),
        source,
    })?;

    let writer = match (stdin, child.stdin.take()) {
        (Some(bytes), Some(mut pipe)) => Some(thread::spawn(move || {
            // A child that never reads stdin gets EPIPE; that is its business.
            let _ = pipe.write_all(&bytes);
        })),
        _ => None,
    };
    let out = drain(child.stdout.take().expect("stdout piped"));
    let err = drain(child.stderr.take().expect("stderr piped"));

    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                kill_group(child.id());
                let _ = child.wait();
                let _ = out.join();
                let _ = err.join();
                if let Some(w) = writer {
                    let _ = w.join();
                }
                return Err(SubprocessError::Timeout { program, timeout });
            }
            Ok(None) => thread::sleep(POLL),
            Err(source) => {
                kill_group(child.id());
                let _ = child.wait();
                return Err(SubprocessError::Wait { program, source });
            }
        }
    };
    if let Some(w) = writer {
        let _ = w.join();
    }
    let stdout = out.join().unwrap_or_default();
    let stderr = err.join().unwrap_or_default();
    Ok(Output {
        code: status.code(),
        stdout,
        stderr,
        duration: start.elapsed(),
    })
}

fn kill_group(pid: u32) {
    // SAFETY: plain syscall; a negative pid addresses the process group the
    // child leads (process_group(0) made its pgid equal its pid).
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

/// A `sh -c` command, the form used for `train_cmd` and `eval_cmd`.
pub fn shell(cmd: &str) -> Command {
    let mut c = Command::new("sh");
    c.arg("-c").arg(cmd);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn captures_output_and_exit_code() {
        let out = run(shell("echo hi; echo err >&2; exit 3"), None, Duration::from_secs(5)).unwrap();
        assert_eq!(out.code, Some(3));
        assert_eq!(out.stdout, b"hi\n");
        assert_eq!(out.stderr, b"err\n");
    }

    #[test]
    fn feeds_stdin() {
        let out = run(shell("tr a-z A-Z"), Some(b"abc".to_vec()), Duration::from_secs(5)).unwrap();
        assert_eq!(out.stdout, b"ABC");
    }

    #[test]
    fn timeout_kills_the_group() {
        let start = Instant::now();
        let err = run(shell("sleep 5; echo late"), None, Duration::from_millis(200)).unwrap_err();
        assert!(matches!(err, SubprocessError::Timeout { .. }));
        assert!(start.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn spawn_failure_is_distinct() {
        let err = run(Command::new("/nonexistent/bin"), None, Duration::from_secs(1)).unwrap_err();
        assert!(matches!(err, SubprocessError::Spawn { .. }));
    }
}
