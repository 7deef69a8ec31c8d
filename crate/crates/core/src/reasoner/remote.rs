//! Chat-style HTTP client for hosted models.
//!
//! Request body (rendering version `ctfgate-reasoner/1`):
//!
//! ```text
//! {"version": "ctfgate-reasoner/1",
//!  "system":   instructions followed by the doc pack text, if any,
//!  "messages": [{"role": "user", "content": JSON text of the decision point}],
//!  "tools":    [{"name", "description", "input_schema"}]}
//! ```
//!
//! No sampling parameters are sent. Accepted replies: a bare candidate set
//! (`{"candidates": [...]}`) or plan (`{"tasks": [...]}`), Anthropic-style
//! `content` blocks, OpenAI-style `choices`, or text embedding one of the
//! bare forms. Tool-use blocks are ranked in order of appearance.

use std::time::Duration;

use serde_json::{json, Map, Value};

use super::docpack::DocPack;
use super::{Candidate, CandidateSet, Reasoner, ReasonerError, ReasonerRequest};
use crate::digest;

pub const URL_ENV: &str = "CTFGATE_REMOTE_URL";
pub const KEY_ENV: &str = "CTFGATE_REMOTE_KEY";
pub const RENDERING_VERSION: &str = "ctfgate-reasoner/1";

const PROPOSE_INSTRUCTIONS: &str = "You propose the next tool calls for a capture-the-flag task. \
Reply with tool calls for the active task, best first, or with a JSON object \
{\"candidates\": [{\"tool_name\", \"arguments\", \"weight\"}], \"rationale\", \"task_done\"}. \
Set task_done when the call finishes the active task. You cannot run anything yourself; \
every call is validated against the tool schemas before execution.";

const PLAN_INSTRUCTIONS: &str = "You plan a capture-the-flag task. Reply with a JSON object \
{\"tasks\": [\"...\"]} listing the atomic tasks still worth attempting, in order. \
An empty list means nothing is left to try.";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub url: String,
    pub key: Option<String>,
    pub request_timeout: Duration,
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each further failure.
    pub initial_backoff: Duration,
}

impl RemoteConfig {
    pub fn new(url: &str) -> Self {
        Self {
            url: url.to_string(),
            key: None,
            request_timeout: Duration::from_secs(120),
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }

    /// Reads the endpoint from the environment; `url` overrides it.
    pub fn from_env(url: Option<&str>) -> Result<Self, String> {
        let url = match url {
            Some(u) => u.to_string(),
            None => std::env::var(URL_ENV).map_err(|_| format!("{URL_ENV} is not set"))?,
        };
        let mut cfg = Self::new(&url);
        cfg.key = std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

pub struct RemoteReasoner {
    config: RemoteConfig,
    agent: ureq::Agent,
    doc_pack: Option<DocPack>,
}

enum Mode {
    Propose,
    Plan,
}

enum Attempt {
    Reply(String),
    Retry(ReasonerError),
    Fatal(ReasonerError),
}

impl RemoteReasoner {
    pub fn new(config: RemoteConfig, doc_pack: Option<DocPack>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            agent,
            doc_pack,
        }
    }

    /// The JSON body sent for `request`.
    pub fn render(&self, request: &ReasonerRequest, plan: bool) -> Value {
        let mut system = String::from(if plan {
            PLAN_INSTRUCTIONS
        } else {
            PROPOSE_INSTRUCTIONS
        });
        if let Some(pack) = &self.doc_pack {
            system.push_str("\n\n");
            system.push_str(&pack.text());
        }
        let tools: Vec<Value> = request
            .catalog
            .iter()
            .map(|s| json!({"name": s.tool_name(), "description": s.description(), "input_schema": input_schema(s)}))
            .collect();
        let context = json!({
            "task": if plan { "plan" } else { "propose" },
            "objective": request.objective,
            "step": request.step,
            "active_task": request.active_task,
            "queue": request.queue,
            "history": request.history,
            "last_rejection": request.last_rejection,
            "doc_pack": request.doc_pack,
        });
        json!({
            "version": RENDERING_VERSION,
            "system": system,
            "messages": [{"role": "user", "content": context.to_string()}],
            "tools": tools,
        })
    }

    fn exchange(&self, body: &Value) -> Result<String, ReasonerError> {
        let mut backoff = self.config.initial_backoff;
        let mut last = ReasonerError::Failure {
            reason: "no attempts configured".into(),
            digest: None,
        };
        for attempt in 1..=self.config.attempts.max(1) {
            if attempt > 1 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(body, attempt) {
                Attempt::Reply(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("reasoner attempt {attempt} failed: {e}");
                    last = e;
                }
            }
        }
        Err(last)
    }

    fn attempt(&self, body: &Value, attempt: u32) -> Attempt {
        let mut req = self
            .agent
            .post(&self.config.url)
            .header("content-type", "application/json");
        if let Some(key) = &self.config.key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(ReasonerError::Failure {
                    reason: format!("transport: {e}"),
                    digest: None,
                })
            }
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry(ReasonerError::Failure {
                    reason: format!("reading reply: {e}"),
                    digest: None,
                })
            }
        };
        match status {
            200..=299 => Attempt::Reply(text),
            429 => Attempt::Retry(ReasonerError::RateLimited { attempts: attempt }),
            500..=599 => Attempt::Retry(ReasonerError::Failure {
                reason: format!("endpoint returned {status}"),
                digest: Some(digest(text.as_bytes())),
            }),
            _ => Attempt::Fatal(ReasonerError::Failure {
                reason: format!("endpoint returned {status}"),
                digest: Some(digest(text.as_bytes())),
            }),
        }
    }

    fn call(
        &self,
        request: &ReasonerRequest,
        mode: Mode,
    ) -> Result<(Value, String), ReasonerError> {
        let body = self.render(request, matches!(mode, Mode::Plan));
        let text = self.exchange(&body)?;
        let reply = serde_json::from_str(&text).unwrap_or(Value::String(text.clone()));
        Ok((reply, text))
    }
}

impl Reasoner for RemoteReasoner {
    fn plan(&mut self, request: &ReasonerRequest) -> Result<Vec<String>, ReasonerError> {
        let (reply, raw) = self.call(request, Mode::Plan)?;
        parse_plan(&reply).ok_or_else(|| malformed("no task list in reply", &raw))
    }

    fn next_candidates(
        &mut self,
        request: &ReasonerRequest,
    ) -> Result<CandidateSet, ReasonerError> {
        let (reply, raw) = self.call(request, Mode::Propose)?;
        let set =
            parse_candidates(&reply).ok_or_else(|| malformed("no tool call in reply", &raw))?;
        set.check().map_err(|e| malformed(&e, &raw))?;
        Ok(set)
    }
}

fn malformed(reason: &str, raw: &str) -> ReasonerError {
    ReasonerError::Failure {
        reason: format!("malformed reply: {reason}"),
        digest: Some(digest(raw.as_bytes())),
    }
}

fn input_schema(schema: &crate::protocol::schema::ToolSchema) -> Value {
    let mut properties = Map::new();
    let mut required = Vec::new();
    for p in schema.params() {
        properties.insert(
            p.name.clone(),
            json!({"description": p.description, "constraint": p.kind.describe()}),
        );
        if p.required {
            required.push(json!(p.name));
        }
    }
    json!({"type": "object", "properties": properties, "required": required})
}

/// Endpoint details worth tracing.
fn reply_meta(reply: &Value) -> Value {
    let mut meta = Map::new();
    for key in ["model", "stop_reason", "usage", "system_fingerprint"] {
        if let Some(v) = reply.get(key) {
            meta.insert(key.into(), v.clone());
        }
    }
    if let Some(reason) = reply.pointer("/choices/0/finish_reason") {
        meta.insert("finish_reason".into(), reason.clone());
    }
    if meta.is_empty() {
        Value::Null
    } else {
        Value::Object(meta)
    }
}

/// Tool-use calls and free text found in a reply.
fn reply_parts(reply: &Value) -> (Vec<Candidate>, String) {
    let mut calls = Vec::new();
    let mut text = Vec::new();
    if let Some(blocks) = reply.get("content").and_then(Value::as_array) {
        for b in blocks {
            match b.get("type").and_then(Value::as_str) {
                Some("tool_use") => calls.extend(tool_candidate(b.get("name"), b.get("input"))),
                Some("text") => {
                    text.extend(b.get("text").and_then(Value::as_str).map(str::to_string))
                }
                _ => {}
            }
        }
    }
    if let Some(msg) = reply.pointer("/choices/0/message") {
        for c in msg
            .get("tool_calls")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let f = c.get("function");
            let args = f.and_then(|f| f.get("arguments")).map(|a| match a {
                Value::String(s) => serde_json::from_str(s).unwrap_or(Value::Null),
                other => other.clone(),
            });
            calls.extend(tool_candidate(f.and_then(|f| f.get("name")), args.as_ref()));
        }
        text.extend(
            msg.get("content")
                .and_then(Value::as_str)
                .map(str::to_string),
        );
    }
    if let Value::String(s) = reply {
        text.push(s.clone());
    }
    (calls, text.join("\n"))
}

fn tool_candidate(name: Option<&Value>, input: Option<&Value>) -> Option<Candidate> {
    let tool_name = name?.as_str()?.to_string();
    let arguments = match input {
        Some(Value::Object(m)) => m.clone(),
        None | Some(Value::Null) => Map::new(),
        Some(_) => return None,
    };
    Some(Candidate {
        tool_name,
        arguments,
        weight: None,
    })
}

/// The outermost `{...}` span of `text` that parses as JSON.
fn embedded_object(text: &str) -> Option<Value> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (start < end)
        .then(|| serde_json::from_str(&text[start..=end]).ok())
        .flatten()
}

pub fn parse_candidates(reply: &Value) -> Option<CandidateSet> {
    let meta = reply_meta(reply);
    let bare = |v: &Value| -> Option<CandidateSet> {
        v.get("candidates")?;
        serde_json::from_value::<CandidateSet>(v.clone()).ok()
    };
    let mut set = if let Some(s) = bare(reply) {
        s
    } else {
        let (calls, text) = reply_parts(reply);
        if !calls.is_empty() {
            let mut s = CandidateSet::new(calls);
            s.rationale = Some(text).filter(|t| !t.trim().is_empty());
            s
        } else {
            embedded_object(&text).as_ref().and_then(bare)?
        }
    };
    if !meta.is_null() {
        set.meta = meta;
    }
    Some(set)
}

pub fn parse_plan(reply: &Value) -> Option<Vec<String>> {
    let tasks = |v: &Value| -> Option<Vec<String>> {
        v.get("tasks")?
            .as_array()?
            .iter()
            .map(|t| t.as_str().map(str::to_string))
            .collect()
    };
    tasks(reply).or_else(|| {
        embedded_object(&reply_parts(reply).1)
            .as_ref()
            .and_then(tasks)
    })
}
