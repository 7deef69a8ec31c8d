//! Validation-gated dispatch from the agent to tool-server processes.
//!
//! Every call produces `call` and `verdict` trace events, then either a
//! `rejection` (nothing is sent to any server) or a `result`. A trace write
//! failure aborts the dispatch before anything further runs.

pub mod client;
pub mod front;
pub mod manifest;
pub mod registry;
pub mod scope;
pub mod trace;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::protocol::schema::{CallId, ParamKind, ToolCall, ToolSchema};
use crate::protocol::validate::{validate_with, Rejection, RejectionStage, ValidationVerdict};
use crate::protocol::wire::{MessageKind, TOOLS_CALL, TOOLS_LIST, TOOLS_REJECT, TOOLS_RESULT};
use crate::tools::catalog;
use crate::tools::server::POLICY_ENV;

pub use client::{ClientError, EndpointDescriptor, ServerClient};
pub use registry::{Health, RegistryEntry, RegistryError, ToolRegistry};
pub use scope::{enforce_scope, PolicyError, ScopePolicy, DEFAULT_MAX_WALL_TIME};
pub use trace::{EventKind, MemorySink, TraceError, TraceEvent, TraceSink, Tracer};

/// Extra wait past a call's budget before the gateway kills the server.
pub const REPLY_GRACE: Duration = Duration::from_secs(2);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub call_id: CallId,
    pub tool_name: String,
    pub output: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Timeout,
    EndpointDown,
    ToolError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolFailure {
    pub call_id: CallId,
    pub tool_name: String,
    pub kind: FailureKind,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DispatchOutcome {
    Completed(ToolResult),
    Rejected(Rejection),
    Failed(ToolFailure),
}

/// Errors that end the session rather than the call.
#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    SinkUnavailable(#[from] TraceError),
    #[error("call id '{0}' was already used in this session")]
    DuplicateCallId(String),
    #[error("scope policy does not cover registered tools: {0}")]
    PolicyCoverage(String),
    #[error("gateway transport failure: {0}")]
    Transport(String),
}

pub struct Gateway {
    registry: ToolRegistry,
    clients: BTreeMap<String, ServerClient>,
    policy: ScopePolicy,
    tracer: Tracer,
    workdir: PathBuf,
    seen: BTreeSet<CallId>,
    deadline: Option<Instant>,
    forwarded: u64,
}

impl Gateway {
    pub fn new(policy: ScopePolicy, tracer: Tracer, workdir: &Path) -> Self {
        Self {
            registry: ToolRegistry::default(),
            clients: BTreeMap::new(),
            policy,
            tracer,
            workdir: workdir.to_path_buf(),
            seen: BTreeSet::new(),
            deadline: None,
            forwarded: 0,
        }
    }

    /// Starts the server and registers what its `tools/list` advertises. An
    /// unreachable server gets its fallback tools registered as degraded.
    pub fn register_server(&mut self, desc: EndpointDescriptor) -> Result<usize, RegistryError> {
        let env = BTreeMap::from([(
            POLICY_ENV.to_string(),
            serde_json::to_string(&self.policy).expect("policy serializes"),
        )]);
        let mut client = ServerClient::new(desc.clone(), &self.workdir, env);
        let advertised = client
            .request(TOOLS_LIST, json!({}), HANDSHAKE_TIMEOUT)
            .map_err(|e| e.to_string())
            .and_then(|reply| {
                if reply.kind != MessageKind::Response {
                    return Err(format!("tools/list answered with {:?}", reply.kind));
                }
                serde_json::from_value::<Vec<ToolSchema>>(reply.payload["tools"].clone())
                    .map_err(|e| e.to_string())
            });
        let server = desc.server.clone();
        self.clients.insert(server.clone(), client);
        match advertised {
            Ok(schemas) => {
                let n = schemas.len();
                for s in schemas {
                    self.registry.register_tool(s, &server, Health::Ready)?;
                }
                Ok(n)
            }
            Err(reason) => {
                for name in &desc.tools {
                    let schema =
                        catalog::schema(name).ok_or_else(|| RegistryError::BadAdvertisement {
                            server: server.clone(),
                            reason: format!("fallback tool '{name}' is not in the catalog"),
                        })?;
                    self.registry.register_tool(
                        schema,
                        &server,
                        Health::Degraded {
                            reason: reason.clone(),
                        },
                    )?;
                }
                Err(RegistryError::UnreachableEndpoint { server, reason })
            }
        }
    }

    /// Drops a tool from this session's catalog.
    pub fn unregister_tool(&mut self, tool: &str) -> bool {
        self.registry.remove(tool).is_some()
    }

    /// Registered tool classes whose scope allow-list is empty.
    pub fn scope_coverage_gaps(&self) -> Vec<String> {
        let mut gaps = BTreeSet::new();
        for e in self.registry.entries() {
            if e.schema.binary_param().is_some() && self.policy.allowed_binaries().is_empty() {
                gaps.insert(format!(
                    "'{}' takes a binary but allowed_binaries is empty",
                    e.schema.tool_name()
                ));
            }
            if e.schema
                .params()
                .iter()
                .any(|p| matches!(p.kind, ParamKind::Ipv4Target { .. }))
                && self.policy.allowed_cidrs().is_empty()
            {
                gaps.insert(format!(
                    "'{}' takes an IPv4 target but allowed_cidrs is empty",
                    e.schema.tool_name()
                ));
            }
        }
        gaps.into_iter().collect()
    }

    pub fn check_scope_coverage(&self) -> Result<(), GatewayError> {
        let gaps = self.scope_coverage_gaps();
        if gaps.is_empty() {
            Ok(())
        } else {
            Err(GatewayError::PolicyCoverage(gaps.join("; ")))
        }
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    pub fn schema(&self, tool: &str) -> Option<&ToolSchema> {
        self.registry.schema(tool)
    }

    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.registry.schemas()
    }

    pub fn policy(&self) -> &ScopePolicy {
        &self.policy
    }

    pub fn tracer(&self) -> &Tracer {
        &self.tracer
    }

    /// Caps every later call's budget at the time left before `deadline`.
    pub fn set_deadline(&mut self, deadline: Option<Instant>) {
        self.deadline = deadline;
    }

    /// Calls sent to a server (handshakes excluded).
    pub fn forwarded_calls(&self) -> u64 {
        self.forwarded
    }

    /// Bytes written to all servers, handshakes included.
    pub fn bytes_sent(&self) -> u64 {
        self.clients.values().map(|c| c.bytes_sent()).sum()
    }

    pub fn server_pids(&self) -> Vec<u32> {
        self.clients.values().filter_map(|c| c.pid()).collect()
    }

    /// The aggregated `tools/list` answer.
    pub fn tools_list_payload(&self) -> Value {
        let tools: Vec<Value> = self
            .registry
            .entries()
            .map(|e| {
                let mut v = serde_json::to_value(&e.schema).expect("schema serializes");
                v["server"] = json!(e.server);
                v["health"] = serde_json::to_value(&e.health).expect("health serializes");
                v
            })
            .collect();
        let servers: Vec<Value> = self
            .clients
            .keys()
            .map(|name| {
                let degraded = self
                    .registry
                    .entries()
                    .any(|e| &e.server == name && matches!(e.health, Health::Degraded { .. }));
                json!({"name": name, "health": if degraded { "degraded" } else { "ready" }})
            })
            .collect();
        json!({"servers": servers, "tools": tools})
    }

    /// Schema verdict and scope verdict for `call`, without side effects.
    pub fn verdicts(&self, call: &ToolCall) -> (ValidationVerdict, ValidationVerdict) {
        let schema_v = validate_with(call, |n| self.registry.schema(n));
        let scope_v = match self.registry.schema(&call.tool_name) {
            Some(s) => enforce_scope(call, s, &self.policy),
            None => ValidationVerdict::ok(),
        };
        (schema_v, scope_v)
    }

    pub fn dispatch(&mut self, call: &ToolCall) -> Result<DispatchOutcome, GatewayError> {
        if self.seen.contains(&call.call_id) {
            return Err(GatewayError::DuplicateCallId(call.call_id.0.clone()));
        }
        self.tracer.emit(
            EventKind::Call,
            json!({"call_id": call.call_id, "tool_name": call.tool_name, "arguments": call.arguments}),
        )?;
        self.seen.insert(call.call_id.clone());
        let (schema_v, scope_v) = self.verdicts(call);
        let valid = schema_v.valid && scope_v.valid;
        self.tracer.emit(
            EventKind::Verdict,
            json!({"call_id": call.call_id, "valid": valid, "schema": schema_v, "scope": scope_v}),
        )?;
        if !valid {
            let stage = match (schema_v.valid, scope_v.valid) {
                (false, false) => RejectionStage::SchemaAndScope,
                (false, true) => RejectionStage::Schema,
                _ => RejectionStage::Scope,
            };
            let mut violations = schema_v.violations;
            violations.extend(scope_v.violations);
            let rejection = Rejection::new(call.call_id.clone(), stage, violations);
            self.tracer.emit(
                EventKind::Rejection,
                serde_json::to_value(&rejection).expect("rejection serializes"),
            )?;
            return Ok(DispatchOutcome::Rejected(rejection));
        }
        let outcome = self.forward(call);
        match &outcome {
            DispatchOutcome::Rejected(r) => {
                self.tracer.emit(
                    EventKind::Rejection,
                    serde_json::to_value(r).expect("rejection serializes"),
                )?;
            }
            DispatchOutcome::Completed(r) => {
                self.tracer.emit(
                    EventKind::Result,
                    json!({"call_id": r.call_id, "tool_name": r.tool_name, "status": "ok", "output": r.output}),
                )?;
            }
            DispatchOutcome::Failed(f) => {
                self.tracer.emit(
                    EventKind::Result,
                    json!({"call_id": f.call_id, "tool_name": f.tool_name, "status": f.kind,
                           "error": {"code": f.code, "message": f.message}}),
                )?;
            }
        }
        Ok(outcome)
    }

    fn forward(&mut self, call: &ToolCall) -> DispatchOutcome {
        let fail = |kind, code: &str, message: String| {
            DispatchOutcome::Failed(ToolFailure {
                call_id: call.call_id.clone(),
                tool_name: call.tool_name.clone(),
                kind,
                code: code.to_string(),
                message,
            })
        };
        let entry = self
            .registry
            .get(&call.tool_name)
            .expect("validated calls name registered tools");
        if let Health::Degraded { reason } = &entry.health {
            return fail(FailureKind::EndpointDown, "endpoint-down", reason.clone());
        }
        let mut budget = self.policy.max_wall_time();
        if let Some(d) = self.deadline {
            budget = budget.min(d.saturating_duration_since(Instant::now()));
        }
        if budget.is_zero() {
            return fail(
                FailureKind::Timeout,
                "episode-time-exhausted",
                "no episode time left for this call".into(),
            );
        }
        let server = entry.server.clone();
        let client = self
            .clients
            .get_mut(&server)
            .expect("registered servers have clients");
        let payload = json!({
            "call_id": call.call_id,
            "tool_name": call.tool_name,
            "arguments": call.arguments,
            "budget_ms": budget.as_millis() as u64,
        });
        self.forwarded += 1;
        let reply = match client.request(TOOLS_CALL, payload, budget + REPLY_GRACE) {
            Ok(r) => r,
            Err(ClientError::Timeout { waited, .. }) => {
                return fail(
                    FailureKind::Timeout,
                    "timeout",
                    format!(
                        "no result within {}s; server '{server}' was terminated",
                        waited.as_secs_f64()
                    ),
                )
            }
            Err(e) => return fail(FailureKind::EndpointDown, "endpoint-down", e.to_string()),
        };
        if let Some((code, message)) = reply.error_parts() {
            let kind = if code == "timeout" {
                FailureKind::Timeout
            } else {
                FailureKind::ToolError
            };
            return fail(kind, code, message.to_string());
        }
        match reply.method.as_deref() {
            Some(TOOLS_RESULT) => DispatchOutcome::Completed(ToolResult {
                call_id: call.call_id.clone(),
                tool_name: call.tool_name.clone(),
                output: reply.payload.get("output").cloned().unwrap_or(Value::Null),
            }),
            Some(TOOLS_REJECT) => match serde_json::from_value::<Rejection>(reply.payload) {
                Ok(mut r) => {
                    r.call_id = call.call_id.clone();
                    DispatchOutcome::Rejected(r)
                }
                Err(e) => fail(
                    FailureKind::ToolError,
                    "protocol-violation",
                    format!("bad tools/reject payload: {e}"),
                ),
            },
            other => fail(
                FailureKind::ToolError,
                "protocol-violation",
                format!("unexpected reply method {other:?}"),
            ),
        }
    }

    /// Stops every server process.
    pub fn shutdown(&mut self) {
        for c in self.clients.values_mut() {
            c.kill();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}
