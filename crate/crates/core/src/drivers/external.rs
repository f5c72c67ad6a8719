//! External drivers: one JSON request on stdin, one JSON response on stdout.

use std::process::Command;
use std::time::Duration;

use super::{DriverError, DriverRequest, DriverResponse};
use crate::subprocess::{self, SubprocessError};

pub fn invoke_external(argv: &[String], request: &DriverRequest, timeout: Duration) -> Result<DriverResponse, DriverError> {
    let role = request.role;
    let (program, args) = argv.split_first().ok_or_else(|| DriverError::Spawn {
        role,
        message: "empty argv".into(),
    })?;
    let mut cmd = Command::new(program);
    cmd.args(args);
    if let Some(dir) = &request.candidate_dir {
        cmd.current_dir(dir);
    }
    let input = serde_json::to_vec(request).expect("request serializes");
    let out = subprocess::run(cmd, Some(input), timeout).map_err(|e| match e {
        SubprocessError::Timeout { timeout, .. } => DriverError::Timeout { role, timeout },
        other => DriverError::Spawn {
            role,
            message: other.to_string(),
        },
    })?;
    if out.code != Some(0) {
        return Err(DriverError::NonZeroExit {
            role,
            code: out.code,
            stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    let mut de = serde_json::Deserializer::from_slice(&out.stdout);
    let response: DriverResponse =
        serde_path_to_error::deserialize(&mut de).map_err(|e| DriverError::InvalidResponse {
            role,
            message: format!("at `{}`: {}", e.path(), e.inner()),
        })?;
    de.end().map_err(|e| DriverError::InvalidResponse {
        role,
        message: format!("trailing output: {e}"),
    })?;
    Ok(response)
}
