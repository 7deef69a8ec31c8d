//! One GDB/MI session owning one debuggee.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::command::{die_with_parent, kill_group};
use super::heap::{walk_chunks, HeapReport};
use super::mi::{parse_mi_record, MiRecord, RecordClass, ResultClass};

#[derive(Debug, Error)]
pub enum DebugError {
    #[error("failed to launch debugger: {0}")]
    LaunchFailure(String),
    #[error("no debug session is running")]
    NoSession,
    #[error("debuggee is not stopped")]
    SessionNotStopped,
    #[error("debugger error: {0}")]
    Gdb(String),
    #[error("debugger did not answer within {0:?}")]
    Timeout(Duration),
    #[error("heap walk failed: {0}")]
    ArenaWalkFailure(String),
}

impl DebugError {
    pub fn code(&self) -> &'static str {
        match self {
            DebugError::LaunchFailure(_) => "launch-failure",
            DebugError::NoSession => "no-session",
            DebugError::SessionNotStopped => "session-not-stopped",
            DebugError::Gdb(_) => "debugger-error",
            DebugError::Timeout(_) => "timeout",
            DebugError::ArenaWalkFailure(_) => "arena-walk-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DebuggeeState {
    NotStarted,
    Running,
    Stopped,
    Exited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopInfo {
    pub state: DebuggeeState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<String>,
}

pub struct GdbSession {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
    next_token: u64,
    state: DebuggeeState,
    inferior_pid: Option<i32>,
    scratch: PathBuf,
}

/// Quotes `s` as an MI c-string.
fn c_quote(s: &str) -> String {
    let mut out = String::from("\"");
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "'\\''"))
}

impl GdbSession {
    pub fn launch(gdb: &Path, workdir: &Path, timeout: Duration) -> Result<Self, DebugError> {
        let mut cmd = Command::new(gdb);
        cmd.args(["--interpreter=mi2", "-q", "-nx"])
            .current_dir(workdir)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .process_group(0);
        use std::os::unix::process::CommandExt;
        die_with_parent(&mut cmd);
        let mut child = cmd
            .spawn()
            .map_err(|e| DebugError::LaunchFailure(format!("{}: {e}", gdb.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let scratch = workdir.join(".ctfgate-debug");
        std::fs::create_dir_all(&scratch).map_err(|e| DebugError::LaunchFailure(e.to_string()))?;
        let mut session = Self {
            child,
            stdin,
            lines: rx,
            next_token: 1,
            state: DebuggeeState::NotStarted,
            inferior_pid: None,
            scratch,
        };
        session.wait_prompt(timeout)?;
        Ok(session)
    }

    pub fn state(&self) -> &DebuggeeState {
        &self.state
    }

    fn recv(&mut self, deadline: Instant, timeout: Duration) -> Result<MiRecord, DebugError> {
        loop {
            let wait = deadline.saturating_duration_since(Instant::now());
            let line = match self.lines.recv_timeout(wait) {
                Ok(l) => l,
                Err(RecvTimeoutError::Timeout) => return Err(DebugError::Timeout(timeout)),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(DebugError::Gdb("debugger exited".into()))
                }
            };
            // The inferior shares nothing with us, but stray non-MI lines can
            // still appear; skip anything that does not parse.
            let Ok(rec) = parse_mi_record(&line) else {
                continue;
            };
            self.observe(&rec);
            return Ok(rec);
        }
    }

    fn observe(&mut self, rec: &MiRecord) {
        match (rec.record_class, rec.async_class.as_deref()) {
            (RecordClass::ExecAsync, Some("running")) => self.state = DebuggeeState::Running,
            (RecordClass::ExecAsync, Some("stopped")) => {
                let exited = rec
                    .field_str("reason")
                    .is_some_and(|r| r.starts_with("exited"));
                self.state = if exited {
                    DebuggeeState::Exited
                } else {
                    DebuggeeState::Stopped
                };
            }
            (RecordClass::NotifyAsync, Some("thread-group-started")) => {
                self.inferior_pid = rec.field_str("pid").and_then(|p| p.parse().ok());
            }
            (RecordClass::NotifyAsync, Some("thread-group-exited")) => {
                self.inferior_pid = None;
                self.state = DebuggeeState::Exited;
            }
            _ => {}
        }
    }

    fn wait_prompt(&mut self, timeout: Duration) -> Result<(), DebugError> {
        let deadline = Instant::now() + timeout;
        while !self.recv(deadline, timeout)?.is_prompt() {}
        Ok(())
    }

    /// Sends one MI command and returns its result record plus the stream
    /// text emitted before it.
    pub fn command(
        &mut self,
        cmd: &str,
        timeout: Duration,
    ) -> Result<(MiRecord, String), DebugError> {
        let token = self.next_token;
        self.next_token += 1;
        writeln!(self.stdin, "{token}{cmd}").map_err(|e| DebugError::Gdb(e.to_string()))?;
        self.stdin
            .flush()
            .map_err(|e| DebugError::Gdb(e.to_string()))?;
        let deadline = Instant::now() + timeout;
        let mut console = String::new();
        loop {
            let rec = self.recv(deadline, timeout)?;
            match rec.record_class {
                RecordClass::ConsoleStream => console.push_str(rec.text.as_deref().unwrap_or("")),
                RecordClass::Result if rec.token == Some(token) => {
                    if rec.result_class == Some(ResultClass::Error) {
                        return Err(DebugError::Gdb(
                            rec.field_str("msg").unwrap_or("unknown error").to_string(),
                        ));
                    }
                    return Ok((rec, console));
                }
                _ => {}
            }
        }
    }

    /// Waits for the next `*stopped`.
    fn wait_stopped(&mut self, timeout: Duration) -> Result<MiRecord, DebugError> {
        let deadline = Instant::now() + timeout;
        loop {
            let rec = self.recv(deadline, timeout)?;
            if rec.record_class == RecordClass::ExecAsync
                && rec.async_class.as_deref() == Some("stopped")
            {
                return Ok(rec);
            }
        }
    }

    /// Loads `binary`, sets breakpoints and runs until the first stop.
    pub fn start(
        &mut self,
        binary: &str,
        args: &[String],
        stdin: Option<&[u8]>,
        breakpoints: &[String],
        timeout: Duration,
    ) -> Result<StopInfo, DebugError> {
        self.command(
            &format!("-file-exec-and-symbols {}", c_quote(binary)),
            timeout,
        )?;
        for b in breakpoints {
            self.command(&format!("-break-insert {}", c_quote(b)), timeout)?;
        }
        let stdin_path = self.scratch.join("stdin");
        let out_path = self.scratch.join("output");
        std::fs::write(&stdin_path, stdin.unwrap_or_default())
            .map_err(|e| DebugError::Gdb(e.to_string()))?;
        let mut set_args: Vec<String> = args.iter().map(|a| shell_quote(a)).collect();
        set_args.push(format!("< {}", shell_quote(&stdin_path.to_string_lossy())));
        set_args.push(format!(
            "> {} 2>&1",
            shell_quote(&out_path.to_string_lossy())
        ));
        self.command(
            &format!(
                "-interpreter-exec console {}",
                c_quote(&format!("set args {}", set_args.join(" ")))
            ),
            timeout,
        )?;
        self.command("-exec-run", timeout)?;
        let stop = self.wait_stopped(timeout)?;
        Ok(stop_info(&stop, &self.state))
    }

    /// Walks the main arena's heap mapping.
    pub fn inspect_heap(
        &mut self,
        count: usize,
        timeout: Duration,
    ) -> Result<HeapReport, DebugError> {
        if self.state != DebuggeeState::Stopped {
            return Err(DebugError::SessionNotStopped);
        }
        let (_, mappings) = self.command(
            &format!(
                "-interpreter-exec console {}",
                c_quote("info proc mappings")
            ),
            timeout,
        )?;
        let (start, end) = heap_mapping(&mappings).ok_or_else(|| {
            DebugError::ArenaWalkFailure("no [heap] mapping in the debuggee".into())
        })?;
        let len = end - start;
        let (rec, _) = self.command(
            &format!("-data-read-memory-bytes {start:#x} {len}"),
            timeout,
        )?;
        let contents = rec
            .field("memory")
            .and_then(|m| match m {
                super::mi::MiValue::List(items) => items.first(),
                _ => None,
            })
            .and_then(|block| block.get("contents"))
            .and_then(|c| c.as_str())
            .ok_or_else(|| {
                DebugError::ArenaWalkFailure("memory read returned no contents".into())
            })?;
        let mem = hex::decode(contents).map_err(|e| DebugError::ArenaWalkFailure(e.to_string()))?;
        Ok(walk_chunks(&mem, start, count))
    }

    /// Debuggee output captured so far.
    pub fn program_output(&self) -> String {
        std::fs::read(self.scratch.join("output"))
            .map(|b| String::from_utf8_lossy(&b).into_owned())
            .unwrap_or_default()
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(pid) = self.inferior_pid.take() {
            // SAFETY: plain signal delivery.
            unsafe {
                libc::kill(pid, libc::SIGKILL);
            }
        }
        let _ = writeln!(self.stdin, "-gdb-exit");
        let _ = self.stdin.flush();
        kill_group(self.child.id() as i32);
        let _ = self.child.wait();
    }
}

impl Drop for GdbSession {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn stop_info(rec: &MiRecord, state: &DebuggeeState) -> StopInfo {
    let frame = rec.field("frame");
    StopInfo {
        state: state.clone(),
        reason: rec.field_str("reason").map(str::to_string),
        function: frame
            .and_then(|f| f.get("func"))
            .and_then(|v| v.as_str())
            .map(str::to_string),
        address: frame
            .and_then(|f| f.get("addr"))
            .and_then(|v| v.as_str())
            .map(str::to_string),
        exit_code: rec.field_str("exit-code").and_then(|c| {
            i64::from_str_radix(c.trim_start_matches('0'), 8)
                .ok()
                .or(Some(0))
        }),
        signal: rec.field_str("signal-name").map(str::to_string),
    }
}

/// Finds `[heap]` in `info proc mappings` output.
pub fn heap_mapping(text: &str) -> Option<(u64, u64)> {
    text.lines()
        .find(|l| l.trim_end().ends_with("[heap]"))
        .and_then(|l| {
            let mut it = l.split_whitespace();
            let start = u64::from_str_radix(it.next()?.trim_start_matches("0x"), 16).ok()?;
            let end = u64::from_str_radix(it.next()?.trim_start_matches("0x"), 16).ok()?;
            (end > start).then_some((start, end))
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_heap_line() {
        let text =
            "          Start Addr           End Addr       Size     Offset  Perms  objfile\n\
                    0x555555559000     0x55555557a000    0x21000        0x0  rw-p   [heap]\n";
        assert_eq!(heap_mapping(text), Some((0x555555559000, 0x55555557a000)));
        assert_eq!(heap_mapping("nothing here"), None);
    }

    #[test]
    fn quoting() {
        assert_eq!(c_quote("a \"b\""), "\"a \\\"b\\\"\"");
        assert_eq!(shell_quote("it's"), "'it'\\''s'");
    }
}
