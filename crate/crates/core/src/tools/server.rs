//! Tool-server process side: the request loop and the native handlers.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Map, Value};

use super::catalog::{self, ServerKind};
use super::command::{run_command, CommandSpec};
use super::debug::{DebugError, GdbSession};
use super::scan::parse_scan_report;
use super::triage::triage_classify;
use crate::gateway::scope::ScopePolicy;
use crate::protocol::schema::{CallId, ToolCall, ToolSchema};
use crate::protocol::validate::{validate_with, Rejection, RejectionStage, Violation};
use crate::protocol::wire::{
    decode_message, read_frame_bytes, write_frame, DecodeError, FrameError, Framing, MessageKind,
    WireMessage, TOOLS_CALL, TOOLS_LIST, TOOLS_REJECT, TOOLS_RESULT,
};

/// Environment variable carrying the scope policy (JSON) to servers.
pub const POLICY_ENV: &str = "CTFGATE_POLICY";
pub const GDB_ENV: &str = "CTFGATE_GDB";
pub const NMAP_ENV: &str = "CTFGATE_NMAP";

const DEFAULT_BUDGET: Duration = Duration::from_secs(120);

pub enum Outcome {
    Output(Value),
    Reject(Rejection),
    Error { code: String, message: String },
}

impl Outcome {
    fn error(code: &str, message: impl ToString) -> Self {
        Outcome::Error {
            code: code.to_string(),
            message: message.to_string(),
        }
    }
}

pub trait ToolHandler {
    fn server_name(&self) -> &str;
    fn tools(&self) -> Vec<ToolSchema>;
    /// `budget` is the wall time the gateway allows for this call.
    fn call(&mut self, call: &ToolCall, budget: Duration) -> Outcome;
    /// Extra fields reported by `tools/list`.
    fn list_extras(&self) -> Map<String, Value> {
        Map::new()
    }
}

/// Serves requests until end of input.
pub fn serve<R: BufRead, W: Write>(
    handler: &mut dyn ToolHandler,
    mut input: R,
    mut output: W,
    framing: Framing,
) -> io::Result<()> {
    let schemas = handler.tools();
    loop {
        let bytes = match read_frame_bytes(&mut input, framing) {
            Ok(Some(b)) => b,
            Ok(None) => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e),
            Err(e) => {
                write_frame(
                    &mut output,
                    framing,
                    &WireMessage::error_response(None, "malformed-frame", &e.to_string()),
                )?;
                continue;
            }
        };
        let msg = match decode_message(&bytes) {
            Ok(m) => m,
            Err(e) => {
                let code = match e {
                    DecodeError::MalformedFrame(_) => "malformed-frame",
                    DecodeError::ProtocolViolation(_) => "protocol-violation",
                };
                write_frame(
                    &mut output,
                    framing,
                    &WireMessage::error_response(None, code, &e.to_string()),
                )?;
                continue;
            }
        };
        if msg.kind != MessageKind::Request {
            continue;
        }
        let id = msg.id.clone().expect("requests carry ids");
        let reply = match msg.method.as_deref() {
            Some(TOOLS_LIST) => {
                let mut payload = handler.list_extras();
                payload.insert("server".into(), json!(handler.server_name()));
                payload.insert(
                    "tools".into(),
                    serde_json::to_value(&schemas).expect("schemas serialize"),
                );
                WireMessage::response(id, TOOLS_LIST, Value::Object(payload))
            }
            Some(TOOLS_CALL) => match parse_call(&msg.payload) {
                Ok((call, budget)) => {
                    let verdict =
                        validate_with(&call, |n| schemas.iter().find(|s| s.tool_name() == n));
                    let outcome = if verdict.valid {
                        handler.call(&call, budget)
                    } else {
                        Outcome::Reject(Rejection::new(
                            call.call_id.clone(),
                            RejectionStage::Schema,
                            verdict.violations,
                        ))
                    };
                    match outcome {
                        Outcome::Output(v) => WireMessage::response(
                            id,
                            TOOLS_RESULT,
                            json!({"call_id": call.call_id, "output": v}),
                        ),
                        Outcome::Reject(r) => WireMessage::response(
                            id,
                            TOOLS_REJECT,
                            serde_json::to_value(&r).expect("rejection serializes"),
                        ),
                        Outcome::Error { code, message } => {
                            let mut m = WireMessage::error_response(Some(id), &code, &message);
                            m.payload["call_id"] = json!(call.call_id);
                            m
                        }
                    }
                }
                Err(e) => WireMessage::error_response(Some(id), "bad-request", &e),
            },
            Some(other) => WireMessage::error_response(
                Some(id),
                "unknown-method",
                &format!("method '{other}' is not served"),
            ),
            None => WireMessage::error_response(Some(id), "bad-request", "request without method"),
        };
        write_frame(&mut output, framing, &reply)?;
    }
}

fn parse_call(payload: &Value) -> Result<(ToolCall, Duration), String> {
    let budget = payload
        .get("budget_ms")
        .and_then(Value::as_u64)
        .map(Duration::from_millis)
        .unwrap_or(DEFAULT_BUDGET);
    let call: ToolCall = serde_json::from_value(payload.clone())
        .map_err(|e| format!("bad tools/call payload: {e}"))?;
    Ok((call, budget))
}

fn policy_from_env() -> Option<ScopePolicy> {
    std::env::var(POLICY_ENV)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
}

fn str_arg<'a>(call: &'a ToolCall, name: &str) -> Option<&'a str> {
    call.arguments.get(name).and_then(Value::as_str)
}

fn list_arg(call: &ToolCall, name: &str) -> Vec<String> {
    call.arguments
        .get(name)
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|v| v.as_str().map(str::to_string))
                .collect()
        })
        .unwrap_or_default()
}

fn unknown_tool(call: &ToolCall) -> Outcome {
    Outcome::error(
        "unknown-tool",
        format!("tool '{}' is not served here", call.tool_name),
    )
}

pub struct CommandsServer {
    policy: Option<ScopePolicy>,
    workdir: PathBuf,
}

impl CommandsServer {
    pub fn new(policy: Option<ScopePolicy>, workdir: PathBuf) -> Self {
        Self { policy, workdir }
    }
}

impl ToolHandler for CommandsServer {
    fn server_name(&self) -> &str {
        "commands"
    }

    fn tools(&self) -> Vec<ToolSchema> {
        ServerKind::Commands.tools()
    }

    fn call(&mut self, call: &ToolCall, budget: Duration) -> Outcome {
        if call.tool_name != "run_command" {
            return unknown_tool(call);
        }
        let Some(policy) = &self.policy else {
            return Outcome::error(
                "scope-violation",
                "no scope policy was provided to this server",
            );
        };
        let requested = call
            .arguments
            .get("timeout_seconds")
            .and_then(Value::as_u64)
            .map(Duration::from_secs)
            .unwrap_or(policy.max_wall_time());
        let spec = CommandSpec {
            binary: PathBuf::from(str_arg(call, "binary").unwrap_or_default()),
            args: list_arg(call, "args"),
            stdin: str_arg(call, "stdin").map(|s| s.as_bytes().to_vec()),
            timeout: requested.min(budget).min(policy.max_wall_time()),
        };
        match run_command(&spec, policy, &self.workdir) {
            Ok(r) => Outcome::Output(serde_json::to_value(r).expect("result serializes")),
            Err(e) => Outcome::error(e.code(), e),
        }
    }
}

pub struct SecopsServer {
    workdir: PathBuf,
    nmap: PathBuf,
    policy: Option<ScopePolicy>,
}

impl SecopsServer {
    pub fn new(policy: Option<ScopePolicy>, workdir: PathBuf) -> Self {
        let nmap = std::env::var_os(NMAP_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| "/usr/bin/nmap".into());
        Self {
            workdir,
            nmap,
            policy,
        }
    }
}

impl ToolHandler for SecopsServer {
    fn server_name(&self) -> &str {
        "secops"
    }

    fn tools(&self) -> Vec<ToolSchema> {
        ServerKind::Secops.tools()
    }

    fn call(&mut self, call: &ToolCall, budget: Duration) -> Outcome {
        match call.tool_name.as_str() {
            "triage" => {
                match triage_classify(str_arg(call, "artifact").unwrap_or_default(), &self.workdir)
                {
                    Ok(r) => Outcome::Output(serde_json::to_value(r).expect("report serializes")),
                    Err(e) => Outcome::error("unreadable-artifact", e),
                }
            }
            "parse_scan_report" => {
                let path = self.workdir.join(str_arg(call, "path").unwrap_or_default());
                match std::fs::read_to_string(&path) {
                    Ok(doc) => scan_outcome(&doc),
                    Err(e) => {
                        Outcome::error("unreadable-report", format!("{}: {e}", path.display()))
                    }
                }
            }
            "port_scan" => {
                let target = str_arg(call, "target").unwrap_or_default();
                let addr_ok = target
                    .parse()
                    .ok()
                    .is_some_and(|a| self.policy.as_ref().is_some_and(|p| p.allows_addr(a)));
                if !addr_ok {
                    return Outcome::error(
                        "scope-violation",
                        format!("target '{target}' is outside the engagement scope"),
                    );
                }
                let port = call
                    .arguments
                    .get("port")
                    .and_then(Value::as_u64)
                    .unwrap_or(0);
                let udp = str_arg(call, "protocol") == Some("udp");
                let mut args = vec![
                    "-oX".to_string(),
                    "-".to_string(),
                    "-Pn".to_string(),
                    "-p".to_string(),
                    port.to_string(),
                ];
                if udp {
                    args.push("-sU".into());
                }
                args.push(target.to_string());
                let mut cmd = std::process::Command::new(&self.nmap);
                cmd.args(&args).current_dir(&self.workdir);
                match super::command::supervise(cmd, None, budget, super::command::CAPTURE_CAP) {
                    Ok(out) if out.timed_out => {
                        Outcome::error("timeout", format!("scan exceeded {budget:?}"))
                    }
                    Ok(out) => scan_outcome(&String::from_utf8_lossy(&out.stdout)),
                    Err(e) => {
                        Outcome::error("spawn-failure", format!("{}: {e}", self.nmap.display()))
                    }
                }
            }
            _ => unknown_tool(call),
        }
    }
}

fn scan_outcome(doc: &str) -> Outcome {
    match parse_scan_report(doc) {
        Ok(hosts) => Outcome::Output(json!({"hosts": hosts})),
        Err(e) => Outcome::error("parse-error", e),
    }
}

pub struct DebugServer {
    policy: Option<ScopePolicy>,
    workdir: PathBuf,
    gdb: PathBuf,
    session: Option<GdbSession>,
}

impl DebugServer {
    pub fn new(policy: Option<ScopePolicy>, workdir: PathBuf) -> Self {
        let gdb = std::env::var_os(GDB_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| "/usr/bin/gdb".into());
        Self {
            policy,
            workdir,
            gdb,
            session: None,
        }
    }

    fn start(&mut self, call: &ToolCall, budget: Duration) -> Result<Value, DebugError> {
        let binary = str_arg(call, "binary").unwrap_or_default();
        if !self
            .policy
            .as_ref()
            .is_some_and(|p| p.allows_binary(binary))
        {
            return Err(DebugError::LaunchFailure(format!(
                "binary '{binary}' is not on the allow-list"
            )));
        }
        self.session = None;
        let mut session = GdbSession::launch(&self.gdb, &self.workdir, budget)?;
        let stop = session.start(
            binary,
            &list_arg(call, "args"),
            str_arg(call, "stdin").map(str::as_bytes),
            &list_arg(call, "breakpoints"),
            budget,
        )?;
        let output = session.program_output();
        self.session = Some(session);
        Ok(json!({"stop": stop, "program_output": output}))
    }
}

impl ToolHandler for DebugServer {
    fn server_name(&self) -> &str {
        "debug"
    }

    fn tools(&self) -> Vec<ToolSchema> {
        ServerKind::Debug.tools()
    }

    fn call(&mut self, call: &ToolCall, budget: Duration) -> Outcome {
        let result = match call.tool_name.as_str() {
            "debug_start" => self.start(call, budget),
            "inspect_heap" => {
                let count = call
                    .arguments
                    .get("count")
                    .and_then(Value::as_u64)
                    .unwrap_or(0) as usize;
                match self.session.as_mut() {
                    Some(s) => s
                        .inspect_heap(count, budget)
                        .map(|r| serde_json::to_value(r).expect("report serializes")),
                    None => Err(DebugError::NoSession),
                }
            }
            "debug_stop" => match self.session.take() {
                Some(s) => {
                    let output = s.program_output();
                    s.stop();
                    Ok(json!({"stopped": true, "program_output": output}))
                }
                None => Err(DebugError::NoSession),
            },
            _ => return unknown_tool(call),
        };
        match result {
            Ok(v) => Outcome::Output(v),
            Err(e) => Outcome::error(e.code(), e),
        }
    }
}

/// Decompiler slot without a backend: every call is a capability refusal.
pub struct DecompilerServer;

pub const DECOMPILER_BACKEND: &str = "ghidra";

impl ToolHandler for DecompilerServer {
    fn server_name(&self) -> &str {
        "decompiler"
    }

    fn tools(&self) -> Vec<ToolSchema> {
        ServerKind::Decompiler.tools()
    }

    fn call(&mut self, call: &ToolCall, _budget: Duration) -> Outcome {
        let offered = call
            .arguments
            .get("func_name")
            .cloned()
            .unwrap_or(Value::Null);
        Outcome::Reject(capability_unavailable(
            &call.call_id,
            DECOMPILER_BACKEND,
            offered,
        ))
    }
}

pub fn capability_unavailable(call_id: &CallId, backend: &str, offered: Value) -> Rejection {
    Rejection::new(
        call_id.clone(),
        RejectionStage::Capability,
        vec![Violation::on_call(
            format!(
                "be served by an available '{backend}' decompiler backend (capability unavailable)"
            ),
            offered,
        )],
    )
}

/// Loopback server for tests: advertises catalog schemas, echoes arguments
/// and counts the calls that reach it. A `stall_ms` argument makes it sleep.
pub struct EchoServer {
    tools: Vec<ToolSchema>,
    calls: u64,
}

impl EchoServer {
    pub fn new(tool_names: &[String]) -> Result<Self, String> {
        let tools = tool_names
            .iter()
            .map(|n| catalog::schema(n).ok_or_else(|| format!("unknown tool '{n}'")))
            .collect::<Result<_, _>>()?;
        Ok(Self { tools, calls: 0 })
    }
}

impl ToolHandler for EchoServer {
    fn server_name(&self) -> &str {
        "echo"
    }

    fn tools(&self) -> Vec<ToolSchema> {
        self.tools.clone()
    }

    fn call(&mut self, call: &ToolCall, _budget: Duration) -> Outcome {
        self.calls += 1;
        if let Some(ms) = std::env::var("CTFGATE_ECHO_STALL_MS")
            .ok()
            .and_then(|s| s.parse().ok())
        {
            std::thread::sleep(Duration::from_millis(ms));
        }
        Outcome::Output(json!({"echo": call.arguments, "calls_received": self.calls}))
    }

    fn list_extras(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("calls_received".into(), json!(self.calls));
        m
    }
}

/// Builds the handler for `kind` (`echo` takes tool names in `extra`).
pub fn handler_for(
    kind: &str,
    extra: &[String],
    workdir: &Path,
) -> Result<Box<dyn ToolHandler>, String> {
    let policy = policy_from_env();
    let workdir = workdir.to_path_buf();
    Ok(match kind {
        "echo" => Box::new(EchoServer::new(extra)?),
        other => match other.parse::<ServerKind>()? {
            ServerKind::Commands => Box::new(CommandsServer::new(policy, workdir)),
            ServerKind::Secops => Box::new(SecopsServer::new(policy, workdir)),
            ServerKind::Debug => Box::new(DebugServer::new(policy, workdir)),
            ServerKind::Decompiler => Box::new(DecompilerServer),
            ServerKind::Symexec => {
                return Err("the symbolic-execution server is provided separately".into())
            }
        },
    })
}

/// Entry point shared by `ctfgate-tool` and `ctfgate serve`.
pub fn run_stdio_server(kind: &str, extra: &[String]) -> Result<(), String> {
    let workdir = std::env::current_dir().map_err(|e| e.to_string())?;
    let mut handler = handler_for(kind, extra, &workdir)?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve(
        handler.as_mut(),
        stdin.lock(),
        stdout.lock(),
        Framing::Lines,
    )
    .map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::wire::read_frame;
    use std::io::Cursor;

    fn roundtrip(handler: &mut dyn ToolHandler, requests: &[WireMessage]) -> Vec<WireMessage> {
        let mut input = Vec::new();
        for r in requests {
            write_frame(&mut input, Framing::Lines, r).unwrap();
        }
        let mut out = Vec::new();
        serve(handler, Cursor::new(input), &mut out, Framing::Lines).unwrap();
        let mut r = Cursor::new(out);
        let mut replies = Vec::new();
        while let Some(m) = read_frame(&mut r, Framing::Lines).unwrap() {
            replies.push(m);
        }
        replies
    }

    #[test]
    fn xrefs_is_a_capability_rejection() {
        let replies = roundtrip(
            &mut DecompilerServer,
            &[WireMessage::request(
                1,
                TOOLS_CALL,
                json!({"call_id": "c1", "tool_name": "get_xrefs", "arguments": {"func_name": "main"}}),
            )],
        );
        assert_eq!(replies[0].method.as_deref(), Some(TOOLS_REJECT));
        let r: Rejection = serde_json::from_value(replies[0].payload.clone()).unwrap();
        assert_eq!(r.stage, RejectionStage::Capability);
        assert!(r.hint.contains("ghidra"));
    }

    #[test]
    fn server_revalidates() {
        let replies = roundtrip(
            &mut DecompilerServer,
            &[WireMessage::request(
                1,
                TOOLS_CALL,
                json!({"call_id": "c1", "tool_name": "get_xrefs", "arguments": {"func_name": ""}}),
            )],
        );
        let r: Rejection = serde_json::from_value(replies[0].payload.clone()).unwrap();
        assert_eq!(r.stage, RejectionStage::Schema);
    }

    #[test]
    fn list_and_unknown_method() {
        let mut echo = EchoServer::new(&["run_command".into()]).unwrap();
        let replies = roundtrip(
            &mut echo,
            &[
                WireMessage::request(1, TOOLS_LIST, json!({})),
                WireMessage::request(2, "tools/frobnicate", json!({})),
            ],
        );
        assert_eq!(replies[0].payload["tools"][0]["tool_name"], "run_command");
        assert_eq!(replies[1].kind, MessageKind::ErrorResponse);
    }

    #[test]
    fn garbage_frame_gets_error_reply() {
        let mut echo = EchoServer::new(&[]).unwrap();
        let mut out = Vec::new();
        serve(
            &mut echo,
            Cursor::new(b"{not json\n".to_vec()),
            &mut out,
            Framing::Lines,
        )
        .unwrap();
        let reply = decode_message(&out).unwrap();
        assert_eq!(reply.error_parts().unwrap().0, "malformed-frame");
    }

    #[test]
    fn commands_without_policy_fail_closed() {
        let mut s = CommandsServer::new(None, PathBuf::from("/"));
        let call = ToolCall::new("c", "run_command", json!({"binary": "/bin/true"}));
        assert!(
            matches!(s.call(&call, DEFAULT_BUDGET), Outcome::Error { ref code, .. } if code == "scope-violation")
        );
    }
}
