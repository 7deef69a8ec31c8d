//! Reduces tool results to bounded observations.
//!
//! Salient fields, by priority (0 kept longest):
//!
//! 0. `flags`: substrings matching the flag pattern
//! 1. `error`, `open_ports`, and scalar fields of the result (dotted paths)
//! 2. `addresses`, `offsets`, `chunks`
//!
//! Cost is a whitespace word count: one word per field name plus the words
//! of its rendered value, plus the raw text while it is kept. Over budget,
//! the raw text goes first, then whole fields from priority 2 up, then
//! trailing flags.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::digest;
use crate::gateway::trace::VOLATILE_KEYS;
use crate::gateway::{ToolFailure, ToolResult};
use crate::protocol::schema::CallId;

pub const DEFAULT_OBSERVATION_BUDGET: usize = 800;
pub const DEFAULT_FLAG_PATTERN: &str = r"flag\{[ -~]+\}";

/// Result fields treated as raw program text.
const TEXT_FIELDS: [&str; 3] = ["stdout", "stderr", "program_output"];
const MAX_LISTED: usize = 32;
const MAX_SCALAR_CHARS: usize = 120;
/// Longest span searched for the shortest full flag match.
const MAX_FLAG_SPAN: usize = 512;

static HEX_ADDR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b0x[0-9a-fA-F]{4,16}\b").expect("static regex"));
static OFFSET: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\boffset\b\s*(?:of|is|at|=|:)?\s*(0x[0-9a-f]+|\d+)").expect("static regex")
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub call_id: CallId,
    pub source: String,
    pub salient: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    pub raw_digest: String,
    pub token_cost: usize,
    pub truncated: bool,
}

impl Observation {
    pub fn flags(&self) -> Vec<&str> {
        self.salient
            .get("flags")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default()
    }
}

/// A flag regex plus its anchored form for full-match checks.
#[derive(Debug, Clone)]
pub struct FlagPattern {
    source: String,
    unanchored: Regex,
    anchored: Regex,
}

impl FlagPattern {
    pub fn new(pattern: &str) -> Result<Self, regex::Error> {
        Ok(Self {
            source: pattern.to_string(),
            unanchored: Regex::new(pattern)?,
            anchored: Regex::new(&format!("^(?:{pattern})$"))?,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn is_full_match(&self, text: &str) -> bool {
        self.anchored.is_match(text)
    }

    /// Non-overlapping matches, each cut back to its shortest full match.
    pub fn find_all(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for line in text.lines() {
            let mut at = 0;
            while let Some(m) = self.unanchored.find_at(line, at) {
                let span = &line[m.start()..m.end()];
                let limit = span.len().min(MAX_FLAG_SPAN);
                let end = (1..=limit)
                    .filter(|e| span.is_char_boundary(*e))
                    .find(|e| self.anchored.is_match(&span[..*e]))
                    .unwrap_or(span.len());
                out.push(span[..end].to_string());
                at = m.start() + end.max(1);
                if at > line.len() {
                    break;
                }
            }
        }
        out
    }
}

impl Default for FlagPattern {
    fn default() -> Self {
        Self::new(DEFAULT_FLAG_PATTERN).expect("default flag pattern compiles")
    }
}

/// Words of a value as it would be shown to the reasoner.
pub fn render_words(v: &Value) -> usize {
    match v {
        Value::Null => 0,
        Value::String(s) => s.split_whitespace().count(),
        Value::Bool(_) | Value::Number(_) => 1,
        Value::Array(a) => a.iter().map(render_words).sum(),
        Value::Object(m) => m.values().map(|v| 1 + render_words(v)).sum(),
    }
}

fn field_cost(v: &Value) -> usize {
    1 + render_words(v)
}

struct Builder {
    fields: Vec<(u8, String, Value)>,
}

impl Builder {
    fn put(&mut self, tier: u8, name: impl Into<String>, v: Value) {
        let name = name.into();
        if !self.fields.iter().any(|(_, n, _)| *n == name) {
            self.fields.push((tier, name, v));
        }
    }

    fn list(&mut self, tier: u8, name: &str, items: Vec<String>) {
        let mut seen = Vec::new();
        for i in items {
            if !seen.contains(&i) {
                seen.push(i);
            }
        }
        seen.truncate(MAX_LISTED);
        if !seen.is_empty() {
            self.put(tier, name, json!(seen));
        }
    }
}

fn scalar_fields(prefix: &str, v: &Value, depth: usize, b: &mut Builder) {
    let Value::Object(m) = v else { return };
    for (k, v) in m {
        if VOLATILE_KEYS.contains(&k.as_str()) || TEXT_FIELDS.contains(&k.as_str()) {
            continue;
        }
        let name = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Bool(_) | Value::Number(_) => b.put(1, name, v.clone()),
            Value::String(s) if s.len() <= MAX_SCALAR_CHARS && !s.contains('\n') => {
                b.put(1, name, v.clone())
            }
            Value::Array(a)
                if !a.is_empty()
                    && a.len() <= 16
                    && a.iter().all(|x| x.is_string() || x.is_number()) =>
            {
                b.put(1, name, v.clone())
            }
            Value::Object(_) if depth > 0 => scalar_fields(&name, v, depth - 1, b),
            _ => {}
        }
    }
}

fn open_ports(output: &Value) -> Vec<String> {
    let mut out = Vec::new();
    for host in output
        .get("hosts")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
    {
        let addr = host.get("host").and_then(Value::as_str).unwrap_or("?");
        for p in host
            .get("ports")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            if p.get("state").and_then(Value::as_str) != Some("open") {
                continue;
            }
            let port = p.get("port").and_then(Value::as_u64).unwrap_or(0);
            let proto = p.get("protocol").and_then(Value::as_str).unwrap_or("tcp");
            let mut s = format!("{addr}:{port}/{proto}");
            if let Some(name) = p.pointer("/service/name").and_then(Value::as_str) {
                s.push(' ');
                s.push_str(name);
            }
            out.push(s);
        }
    }
    out
}

fn heap_chunks(output: &Value) -> Vec<String> {
    output
        .get("chunks")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .map(|c| {
            format!(
                "{}:{}:{}",
                c.get("address").and_then(Value::as_str).unwrap_or("?"),
                c.get("size").and_then(Value::as_u64).unwrap_or(0),
                if c.get("in_use").and_then(Value::as_bool).unwrap_or(false) {
                    "used"
                } else {
                    "free"
                }
            )
        })
        .collect()
}

fn string_leaves<'a>(v: &'a Value, out: &mut Vec<&'a str>) {
    match v {
        Value::String(s) => out.push(s),
        Value::Array(a) => a.iter().for_each(|x| string_leaves(x, out)),
        Value::Object(m) => m.values().for_each(|x| string_leaves(x, out)),
        _ => {}
    }
}

fn raw_text(output: &Value) -> String {
    let parts: Vec<&str> = TEXT_FIELDS
        .iter()
        .filter_map(|k| output.get(*k).and_then(Value::as_str))
        .filter(|s| !s.is_empty())
        .collect();
    let present = TEXT_FIELDS.iter().any(|k| output.get(*k).is_some());
    if !present {
        output.to_string()
    } else {
        parts.join("\n")
    }
}

fn finish(
    call_id: CallId,
    source: &str,
    mut b: Builder,
    raw: Option<String>,
    raw_digest: String,
    budget: usize,
) -> Observation {
    let mut cost: usize = b.fields.iter().map(|(_, _, v)| field_cost(v)).sum();
    let mut truncated = false;
    let mut raw = raw.filter(|r| !r.trim().is_empty());
    if let Some(r) = &raw {
        let words = r.split_whitespace().count();
        if cost + words > budget {
            raw = None;
            truncated = true;
        } else {
            cost += words;
        }
    }
    for tier in [2u8, 1] {
        while cost > budget {
            let Some(pos) = b.fields.iter().rposition(|(t, _, _)| *t == tier) else {
                break;
            };
            let (_, _, v) = b.fields.remove(pos);
            cost -= field_cost(&v);
            truncated = true;
        }
    }
    if cost > budget {
        if let Some(pos) = b.fields.iter().position(|(_, n, _)| n == "flags") {
            let Value::Array(flags) = &mut b.fields[pos].2 else {
                unreachable!("flags are a list")
            };
            while cost > budget && !flags.is_empty() {
                let f = flags.pop().expect("nonempty");
                cost -= render_words(&f);
                truncated = true;
            }
            if flags.is_empty() {
                b.fields.remove(pos);
                cost -= 1;
            }
        }
    }
    Observation {
        call_id,
        source: source.to_string(),
        salient: b.fields.into_iter().map(|(_, n, v)| (n, v)).collect(),
        raw,
        raw_digest,
        token_cost: cost,
        truncated,
    }
}

/// Extracts salient fields from a completed call within `budget` words.
pub fn parse_observation(result: &ToolResult, budget: usize, flags: &FlagPattern) -> Observation {
    let output = &result.output;
    let mut b = Builder { fields: Vec::new() };
    let mut leaves = Vec::new();
    string_leaves(output, &mut leaves);

    b.list(
        0,
        "flags",
        leaves.iter().flat_map(|s| flags.find_all(s)).collect(),
    );
    b.list(1, "open_ports", open_ports(output));
    scalar_fields("", output, 1, &mut b);
    b.list(2, "chunks", heap_chunks(output));
    b.list(
        2,
        "addresses",
        leaves
            .iter()
            .flat_map(|s| HEX_ADDR.find_iter(s).map(|m| m.as_str().to_string()))
            .collect(),
    );
    b.list(
        2,
        "offsets",
        leaves
            .iter()
            .flat_map(|s| OFFSET.captures_iter(s).map(|c| c[1].to_string()))
            .collect(),
    );
    let full = output.to_string();
    finish(
        result.call_id.clone(),
        &result.tool_name,
        b,
        Some(raw_text(output)),
        digest(full.as_bytes()),
        budget,
    )
}

/// A timeout, outage or tool error, recorded as an observation.
pub fn failure_observation(failure: &ToolFailure, budget: usize) -> Observation {
    let mut b = Builder { fields: Vec::new() };
    b.put(
        1,
        "error",
        json!(format!("{}: {}", failure.code, failure.message)),
    );
    b.put(
        1,
        "failure",
        serde_json::to_value(failure.kind).expect("kind serializes"),
    );
    let full = serde_json::to_string(failure).expect("failure serializes");
    finish(
        failure.call_id.clone(),
        &failure.tool_name,
        b,
        None,
        digest(full.as_bytes()),
        budget,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(tool: &str, output: Value) -> ToolResult {
        ToolResult {
            call_id: CallId::new("c1"),
            tool_name: tool.into(),
            output,
        }
    }

    #[test]
    fn flags_are_cut_to_shortest_match() {
        let p = FlagPattern::default();
        assert_eq!(
            p.find_all("x flag{a} and flag{b c} y"),
            vec!["flag{a}", "flag{b c}"]
        );
        assert!(p.find_all("ctf{abc}").is_empty());
        assert!(p.is_full_match("flag{abc}"));
        assert!(!p.is_full_match("flag{abc} "));
    }

    #[test]
    fn scan_ports_are_salient() {
        let out = json!({"hosts": [{"host": "10.0.0.5", "ports": [
            {"port": 22, "protocol": "tcp", "state": "open", "service": {"name": "ssh"}},
            {"port": 80, "protocol": "tcp", "state": "open"},
            {"port": 81, "protocol": "tcp", "state": "closed"},
            {"port": 443, "protocol": "tcp", "state": "open"}
        ]}]});
        let o = parse_observation(&result("port_scan", out), 800, &FlagPattern::default());
        assert_eq!(
            o.salient["open_ports"],
            json!(["10.0.0.5:22/tcp ssh", "10.0.0.5:80/tcp", "10.0.0.5:443/tcp"])
        );
    }

    #[test]
    fn command_output_flag() {
        let out = json!({"exit_code": 0, "signal": null, "stdout": "junk\nflag{s3cret}\n", "stderr": "", "duration_ms": 4, "truncated": false});
        let o = parse_observation(&result("run_command", out), 800, &FlagPattern::default());
        assert_eq!(o.flags(), vec!["flag{s3cret}"]);
        assert_eq!(o.salient["exit_code"], json!(0));
        assert!(!o.salient.contains_key("duration_ms"));
        assert_eq!(o.raw.as_deref(), Some("junk\nflag{s3cret}\n"));
        assert!(!o.truncated);
    }

    #[test]
    fn addresses_and_offsets() {
        let out = json!({"stdout": "leak: 0x7ffff7a0d000\ncrash at offset 72\n"});
        let o = parse_observation(&result("run_command", out), 800, &FlagPattern::default());
        assert_eq!(o.salient["addresses"], json!(["0x7ffff7a0d000"]));
        assert_eq!(o.salient["offsets"], json!(["72"]));
    }

    #[test]
    fn low_priority_fields_go_before_flags() {
        let out = json!({"exit_code": 0, "stdout": "flag{a} 0x401000 0x401010"});
        let o = parse_observation(&result("run_command", out), 3, &FlagPattern::default());
        assert_eq!(o.salient.keys().collect::<Vec<_>>(), vec!["flags"]);
        assert_eq!(o.token_cost, 2);
        assert!(o.truncated);
        assert!(o.raw.is_none());
    }
}
