//! Allow-listed process execution with capped capture and group kill.

use std::io::{self, Read, Write};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::scope::ScopePolicy;

/// Per-stream capture cap.
pub const CAPTURE_CAP: usize = 1024 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct CommandSpec {
    pub binary: PathBuf,
    pub args: Vec<String>,
    pub stdin: Option<Vec<u8>>,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandResult {
    /// Exit status, or `128 + signal` when killed by a signal.
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
    pub truncated: bool,
}

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("binary '{0}' is not on the allow-list")]
    ScopeViolation(String),
    #[error("invalid command: {0}")]
    InvalidSpec(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("failed to spawn '{binary}': {source}")]
    SpawnFailure { binary: String, source: io::Error },
}

impl CommandError {
    pub fn code(&self) -> &'static str {
        match self {
            CommandError::ScopeViolation(_) => "scope-violation",
            CommandError::InvalidSpec(_) => "invalid-spec",
            CommandError::Timeout(_) => "timeout",
            CommandError::SpawnFailure { .. } => "spawn-failure",
        }
    }
}

/// Raw outcome of a supervised child.
#[derive(Debug)]
pub struct ProcessOutput {
    pub status: std::process::ExitStatus,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub stdout_truncated: bool,
    pub stderr_truncated: bool,
    pub elapsed: Duration,
    pub timed_out: bool,
}

/// Runs `spec` after re-checking the binary against `policy`.
pub fn run_command(
    spec: &CommandSpec,
    policy: &ScopePolicy,
    workdir: &Path,
) -> Result<CommandResult, CommandError> {
    let binary = spec.binary.to_string_lossy().into_owned();
    if !spec.binary.is_absolute() {
        return Err(CommandError::InvalidSpec(format!(
            "binary '{binary}' is not an absolute path"
        )));
    }
    if spec.args.iter().any(|a| a.contains('\0')) {
        return Err(CommandError::InvalidSpec(
            "argument contains a NUL byte".into(),
        ));
    }
    if !policy.allows_binary(&binary) {
        return Err(CommandError::ScopeViolation(binary));
    }
    let mut cmd = Command::new(&spec.binary);
    cmd.args(&spec.args).current_dir(workdir);
    let out = supervise(cmd, spec.stdin.as_deref(), spec.timeout, CAPTURE_CAP)
        .map_err(|source| CommandError::SpawnFailure { binary, source })?;
    if out.timed_out {
        return Err(CommandError::Timeout(spec.timeout));
    }
    let signal = out.status.signal();
    Ok(CommandResult {
        exit_code: out
            .status
            .code()
            .unwrap_or_else(|| 128 + signal.unwrap_or(0)),
        signal,
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        duration_ms: out.elapsed.as_millis() as u64,
        truncated: out.stdout_truncated || out.stderr_truncated,
    })
}

/// Spawns `cmd` in its own process group, feeds stdin, captures up to `cap`
/// bytes per stream, and kills the whole group on timeout and on return.
pub fn supervise(
    mut cmd: Command,
    stdin: Option<&[u8]>,
    timeout: Duration,
    cap: usize,
) -> io::Result<ProcessOutput> {
    cmd.stdin(if stdin.is_some() {
        Stdio::piped()
    } else {
        Stdio::null()
    })
    .stdout(Stdio::piped())
    .stderr(Stdio::piped())
    .process_group(0);
    die_with_parent(&mut cmd);

    let start = Instant::now();
    let mut child = cmd.spawn()?;
    let pgid = child.id() as i32;

    let writer = match (stdin, child.stdin.take()) {
        (Some(bytes), Some(mut pipe)) => {
            let bytes = bytes.to_vec();
            // Broken pipe just means the child stopped reading.
            Some(thread::spawn(move || {
                let _ = pipe.write_all(&bytes);
            }))
        }
        _ => None,
    };
    let out_reader = capture(child.stdout.take(), cap);
    let err_reader = capture(child.stderr.take(), cap);

    let (status, timed_out) = wait_deadline(&mut child, start + timeout)?;
    kill_group(pgid);

    if let Some(w) = writer {
        let _ = w.join();
    }
    let (stdout, stdout_truncated) = out_reader.join().unwrap_or_default();
    let (stderr, stderr_truncated) = err_reader.join().unwrap_or_default();
    Ok(ProcessOutput {
        status,
        stdout,
        stderr,
        stdout_truncated,
        stderr_truncated,
        elapsed: start.elapsed(),
        timed_out,
    })
}

fn wait_deadline(
    child: &mut Child,
    deadline: Instant,
) -> io::Result<(std::process::ExitStatus, bool)> {
    let pgid = child.id() as i32;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((status, false));
        }
        if Instant::now() >= deadline {
            kill_group(pgid);
            return Ok((child.wait()?, true));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

fn capture<R: Read + Send + 'static>(
    stream: Option<R>,
    cap: usize,
) -> thread::JoinHandle<(Vec<u8>, bool)> {
    thread::spawn(move || {
        let Some(mut stream) = stream else {
            return (Vec::new(), false);
        };
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut buf = [0u8; 16 * 1024];
        loop {
            match stream.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => break,
            }
        }
        (kept, truncated)
    })
}

/// SIGKILLs every process in group `pgid`.
pub fn kill_group(pgid: i32) {
    if pgid > 0 {
        // SAFETY: killpg has no memory-safety preconditions.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
    }
}

/// Asks the kernel to SIGKILL the child if this process dies first.
pub fn die_with_parent(cmd: &mut Command) {
    // SAFETY: prctl is async-signal-safe and touches no shared state.
    unsafe {
        cmd.pre_exec(|| {
            if libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL) != 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
}
