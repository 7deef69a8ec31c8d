//! Gateway side of a tool-server process: spawn, request, kill on overrun.

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::protocol::wire::{read_frame, write_frame, FrameError, Framing, MessageId, WireMessage};
use crate::tools::command::{die_with_parent, kill_group};

/// How to launch one tool server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointDescriptor {
    #[serde(rename = "name")]
    pub server: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    /// Catalog tools registered (degraded) when the server cannot be reached.
    #[serde(default)]
    pub tools: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("cannot start server '{server}': {message}")]
    Spawn { server: String, message: String },
    #[error("server '{server}' went away: {message}")]
    Down { server: String, message: String },
    #[error("server '{server}' did not answer within {waited:?}")]
    Timeout { server: String, waited: Duration },
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<Result<WireMessage, String>>,
}

pub struct ServerClient {
    desc: EndpointDescriptor,
    workdir: PathBuf,
    extra_env: BTreeMap<String, String>,
    proc: Option<Running>,
    next_id: u64,
    bytes_sent: u64,
    requests_sent: u64,
    spawns: u64,
}

impl ServerClient {
    pub fn new(
        desc: EndpointDescriptor,
        workdir: &Path,
        extra_env: BTreeMap<String, String>,
    ) -> Self {
        Self {
            desc,
            workdir: workdir.to_path_buf(),
            extra_env,
            proc: None,
            next_id: 1,
            bytes_sent: 0,
            requests_sent: 0,
            spawns: 0,
        }
    }

    pub fn descriptor(&self) -> &EndpointDescriptor {
        &self.desc
    }

    /// Bytes written to the server's input, across respawns.
    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn requests_sent(&self) -> u64 {
        self.requests_sent
    }

    pub fn spawns(&self) -> u64 {
        self.spawns
    }

    pub fn is_running(&self) -> bool {
        self.proc.is_some()
    }

    pub fn pid(&self) -> Option<u32> {
        self.proc.as_ref().map(|p| p.child.id())
    }

    fn spawn(&mut self) -> Result<(), ClientError> {
        let spawn_err = |message: String| ClientError::Spawn {
            server: self.desc.server.clone(),
            message,
        };
        let (program, args) = self
            .desc
            .command
            .split_first()
            .ok_or_else(|| spawn_err("empty command".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .current_dir(&self.workdir)
            .envs(&self.desc.env)
            .envs(&self.extra_env)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .process_group(0);
        die_with_parent(&mut cmd);
        let mut child = cmd.spawn().map_err(|e| spawn_err(e.to_string()))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut r = BufReader::new(stdout);
            loop {
                match read_frame(&mut r, Framing::Lines) {
                    Ok(Some(m)) => {
                        if tx.send(Ok(m)).is_err() {
                            break;
                        }
                    }
                    Ok(None) | Err(FrameError::Io(_)) => break,
                    Err(e) => {
                        if tx.send(Err(e.to_string())).is_err() {
                            break;
                        }
                    }
                }
            }
        });
        self.spawns += 1;
        self.proc = Some(Running {
            child,
            stdin,
            replies: rx,
        });
        Ok(())
    }

    /// Kills the server's process group; the next request respawns it.
    pub fn kill(&mut self) {
        if let Some(mut p) = self.proc.take() {
            kill_group(p.child.id() as i32);
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }

    /// Sends one request and waits up to `wait` for the matching reply.
    pub fn request(
        &mut self,
        method: &str,
        payload: Value,
        wait: Duration,
    ) -> Result<WireMessage, ClientError> {
        if self.proc.is_none() {
            self.spawn()?;
        }
        let id = self.next_id;
        self.next_id += 1;
        let msg = WireMessage::request(id, method, payload);
        let server = self.desc.server.clone();
        let p = self.proc.as_mut().expect("spawned above");
        let written = write_frame(&mut p.stdin, Framing::Lines, &msg)
            .and_then(|n| p.stdin.flush().map(|_| n));
        match written {
            Ok(n) => {
                self.bytes_sent += n as u64;
                self.requests_sent += 1;
            }
            Err(e) => {
                self.kill();
                return Err(ClientError::Down {
                    server,
                    message: e.to_string(),
                });
            }
        }
        let deadline = Instant::now() + wait;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let p = self.proc.as_mut().expect("still running");
            match p.replies.recv_timeout(left) {
                Ok(Ok(reply)) if reply.id == Some(MessageId::Num(id)) => return Ok(reply),
                Ok(Ok(_stale)) => continue,
                Ok(Err(message)) => {
                    self.kill();
                    return Err(ClientError::Down { server, message });
                }
                Err(RecvTimeoutError::Timeout) => {
                    self.kill();
                    return Err(ClientError::Timeout {
                        server,
                        waited: wait,
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    self.kill();
                    return Err(ClientError::Down {
                        server,
                        message: "server closed its output".into(),
                    });
                }
            }
        }
    }
}

impl Drop for ServerClient {
    fn drop(&mut self) {
        self.kill();
    }
}
