//! The constraint function: maps a proposed call to a verdict against its
//! schema. Invalidity is a value here, never an error.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::schema::{CallId, ParamKind, ToolCall, ToolSchema};

/// One failed constraint. `param: None` means the violation concerns the
/// call as a whole (unknown tool, unknown parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub param: Option<String>,
    pub constraint: String,
    pub offered: Value,
}

impl Violation {
    pub fn on_param(param: &str, constraint: impl Into<String>, offered: Value) -> Self {
        Self {
            param: Some(param.to_string()),
            constraint: constraint.into(),
            offered,
        }
    }

    pub fn on_call(constraint: impl Into<String>, offered: Value) -> Self {
        Self {
            param: None,
            constraint: constraint.into(),
            offered,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.param {
            Some(p) => write!(
                f,
                "parameter '{p}' must be {}; offered {}",
                self.constraint, self.offered
            ),
            None => write!(f, "call must {}; offered {}", self.constraint, self.offered),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationVerdict {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self {
            valid: violations.is_empty(),
            violations,
        }
    }

    pub fn ok() -> Self {
        Self::from_violations(Vec::new())
    }
}

/// Which gate produced a rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionStage {
    Schema,
    Scope,
    /// Schema and scope both failed.
    SchemaAndScope,
    /// The tool server refused for lack of a backend.
    Capability,
}

/// Structured refusal returned to the reasoner in place of a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub call_id: CallId,
    pub stage: RejectionStage,
    pub violations: Vec<Violation>,
    pub hint: String,
}

impl Rejection {
    pub fn new(call_id: CallId, stage: RejectionStage, violations: Vec<Violation>) -> Self {
        let hint = correction_hint(stage, &violations);
        Self {
            call_id,
            stage,
            violations,
            hint,
        }
    }
}

fn correction_hint(stage: RejectionStage, violations: &[Violation]) -> String {
    let lead = match stage {
        RejectionStage::Schema => "Fix the argument types and values, then resend the call",
        RejectionStage::Scope => "Retarget the call inside the engagement scope",
        RejectionStage::SchemaAndScope => {
            "Fix the arguments and retarget the call inside the engagement scope"
        }
        RejectionStage::Capability => "This capability is unavailable; pivot to another tool",
    };
    let details: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
    format!("{lead}: {}.", details.join("; "))
}

/// Checks `call` against `schema`, reporting every failure. A call whose
/// tool name does not match the schema is treated as an unknown tool.
pub fn validate_call(call: &ToolCall, schema: &ToolSchema) -> ValidationVerdict {
    if call.tool_name != schema.tool_name() {
        return unknown_tool(call);
    }
    let mut violations = Vec::new();
    for spec in schema.params() {
        match call.arguments.get(&spec.name) {
            None | Some(Value::Null) if spec.required => violations.push(Violation::on_param(
                &spec.name,
                "present (required)",
                Value::Null,
            )),
            None | Some(Value::Null) => {}
            Some(value) => {
                if !spec.kind.admits(value) {
                    violations.push(Violation::on_param(
                        &spec.name,
                        describe_failure(&spec.kind, value),
                        value.clone(),
                    ));
                }
            }
        }
    }
    for (name, value) in &call.arguments {
        if schema.param(name).is_none() {
            violations.push(Violation::on_call(
                format!("not include unknown parameter '{name}'"),
                value.clone(),
            ));
        }
    }
    ValidationVerdict::from_violations(violations)
}

/// Validates against whichever schema `lookup` yields for the tool name.
pub fn validate_with<'a>(
    call: &ToolCall,
    lookup: impl FnOnce(&str) -> Option<&'a ToolSchema>,
) -> ValidationVerdict {
    match lookup(&call.tool_name) {
        Some(schema) => validate_call(call, schema),
        None => unknown_tool(call),
    }
}

fn unknown_tool(call: &ToolCall) -> ValidationVerdict {
    ValidationVerdict::from_violations(vec![Violation::on_call(
        "name a registered tool",
        Value::String(call.tool_name.clone()),
    )])
}

fn describe_failure(kind: &ParamKind, value: &Value) -> String {
    match (kind, value.as_array()) {
        (ParamKind::List { item, .. }, Some(items)) => {
            let base = kind.describe();
            match items.iter().position(|v| !item.admits(v)) {
                Some(i) => format!("{base}; element {i} is invalid"),
                None => base,
            }
        }
        _ => kind.describe(),
    }
}
