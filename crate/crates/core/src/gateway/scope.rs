//! Engagement scope: IPv4 ranges, binary allow-list, per-call wall time.

use std::collections::BTreeSet;
use std::path::{Component, Path};
use std::time::Duration;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::protocol::schema::{parse_ipv4, ParamKind, ToolCall, ToolSchema};
use crate::protocol::validate::{ValidationVerdict, Violation};

pub const DEFAULT_MAX_WALL_TIME: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot read policy {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid policy: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyFile", into = "PolicyFile")]
pub struct ScopePolicy {
    allowed_cidrs: Vec<Ipv4Net>,
    allowed_binaries: BTreeSet<String>,
    max_wall_time: Duration,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(default)]
    allowed_cidrs: Vec<String>,
    #[serde(default)]
    allowed_binaries: Vec<String>,
    #[serde(default = "default_wall_secs")]
    max_wall_time_seconds: u64,
}

fn default_wall_secs() -> u64 {
    DEFAULT_MAX_WALL_TIME.as_secs()
}

impl TryFrom<PolicyFile> for ScopePolicy {
    type Error = PolicyError;

    fn try_from(f: PolicyFile) -> Result<Self, Self::Error> {
        let mut cidrs = Vec::new();
        for c in &f.allowed_cidrs {
            let net: Ipv4Net = c
                .parse()
                .map_err(|_| PolicyError::Invalid(format!("'{c}' is not an IPv4 CIDR block")))?;
            cidrs.push(net);
        }
        for b in &f.allowed_binaries {
            if !Path::new(b).is_absolute() {
                return Err(PolicyError::Invalid(format!(
                    "allowed binary '{b}' is not an absolute path"
                )));
            }
        }
        if f.max_wall_time_seconds == 0 {
            return Err(PolicyError::Invalid(
                "max_wall_time_seconds must be positive".into(),
            ));
        }
        Ok(ScopePolicy::new(
            cidrs,
            f.allowed_binaries.into_iter().collect(),
            Duration::from_secs(f.max_wall_time_seconds),
        ))
    }
}

impl From<ScopePolicy> for PolicyFile {
    fn from(p: ScopePolicy) -> Self {
        PolicyFile {
            allowed_cidrs: p.allowed_cidrs.iter().map(|c| c.to_string()).collect(),
            allowed_binaries: p.allowed_binaries.into_iter().collect(),
            max_wall_time_seconds: p.max_wall_time.as_secs().max(1),
        }
    }
}

impl ScopePolicy {
    pub fn new(
        allowed_cidrs: Vec<Ipv4Net>,
        allowed_binaries: BTreeSet<String>,
        max_wall_time: Duration,
    ) -> Self {
        Self {
            allowed_cidrs,
            allowed_binaries,
            max_wall_time,
        }
    }

    /// Reads a policy file; `.toml` files are TOML, anything else JSON.
    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Unreadable {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| PolicyError::Invalid(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| PolicyError::Invalid(e.to_string()))
        }
    }

    pub fn allowed_cidrs(&self) -> &[Ipv4Net] {
        &self.allowed_cidrs
    }

    pub fn allowed_binaries(&self) -> &BTreeSet<String> {
        &self.allowed_binaries
    }

    pub fn max_wall_time(&self) -> Duration {
        self.max_wall_time
    }

    pub fn with_max_wall_time(mut self, d: Duration) -> Self {
        self.max_wall_time = d;
        self
    }

    /// Exact match on a normalized absolute path.
    pub fn allows_binary(&self, binary: &str) -> bool {
        is_normal_absolute(binary) && self.allowed_binaries.contains(binary)
    }

    pub fn allows_addr(&self, addr: std::net::Ipv4Addr) -> bool {
        self.allowed_cidrs.iter().any(|c| c.contains(&addr))
    }

    fn cidr_text(&self) -> String {
        if self.allowed_cidrs.is_empty() {
            return "(none)".to_string();
        }
        let v: Vec<String> = self.allowed_cidrs.iter().map(|c| c.to_string()).collect();
        v.join(", ")
    }

    fn binary_text(&self) -> String {
        if self.allowed_binaries.is_empty() {
            return "(none)".to_string();
        }
        self.allowed_binaries
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(", ")
    }
}

fn is_normal_absolute(p: &str) -> bool {
    let path = Path::new(p);
    path.is_absolute()
        && path
            .components()
            .all(|c| matches!(c, Component::RootDir | Component::Normal(_)))
}

/// Checks the scope-relevant parameters of `call`. Parameters too malformed
/// to interpret are left to schema validation.
pub fn enforce_scope(
    call: &ToolCall,
    schema: &ToolSchema,
    policy: &ScopePolicy,
) -> ValidationVerdict {
    let mut violations = Vec::new();
    for spec in schema.params() {
        let Some(value) = call.arguments.get(&spec.name) else {
            continue;
        };
        if targets_ipv4(&spec.kind) && !ipv4_in_scope(value, policy) {
            violations.push(Violation::on_param(
                &spec.name,
                format!("within allowed CIDRs {}", policy.cidr_text()),
                value.clone(),
            ));
        }
        if schema.binary_param() == Some(spec.name.as_str()) {
            if let Some(b) = value.as_str() {
                if !policy.allows_binary(b) {
                    violations.push(Violation::on_param(
                        &spec.name,
                        format!("an allow-listed binary ({})", policy.binary_text()),
                        value.clone(),
                    ));
                }
            }
        }
    }
    ValidationVerdict::from_violations(violations)
}

fn targets_ipv4(kind: &ParamKind) -> bool {
    match kind {
        ParamKind::Ipv4Target { .. } => true,
        ParamKind::List { item, .. } => targets_ipv4(item),
        _ => false,
    }
}

fn ipv4_in_scope(value: &Value, policy: &ScopePolicy) -> bool {
    match value {
        Value::String(s) => parse_ipv4(s).is_none_or(|a| policy.allows_addr(a)),
        Value::Array(items) => items.iter().all(|v| ipv4_in_scope(v, policy)),
        _ => true,
    }
}
