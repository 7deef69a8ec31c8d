use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// Pattern every hex-address parameter must fully match.
pub const HEX_ADDRESS_PATTERN: &str = "0x[0-9a-fA-F]+";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("tool name must be nonempty")]
    EmptyToolName,
    #[error("tool '{tool}' declares parameter '{param}' more than once")]
    DuplicateParam { tool: String, param: String },
    #[error("tool '{tool}': parameter '{param}' has min {min} greater than max {max}")]
    InvertedRange {
        tool: String,
        param: String,
        min: i64,
        max: i64,
    },
    #[error("tool '{tool}': parameter '{param}' is an enum without variants")]
    EmptyEnum { tool: String, param: String },
    #[error("tool '{tool}': binary parameter '{param}' is not a declared string parameter")]
    BadBinaryParam { tool: String, param: String },
    #[error("invalid pattern '{pattern}': {reason}")]
    BadPattern { pattern: String, reason: String },
}

/// A regular expression that must match a whole value.
#[derive(Clone)]
pub struct Pattern {
    source: String,
    anchored: Regex,
}

impl Pattern {
    pub fn new(source: &str) -> Result<Self, SchemaError> {
        let anchored =
            Regex::new(&format!("^(?:{source})$")).map_err(|e| SchemaError::BadPattern {
                pattern: source.to_string(),
                reason: e.to_string(),
            })?;
        Ok(Self {
            source: source.to_string(),
            anchored,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    pub fn is_full_match(&self, text: &str) -> bool {
        self.anchored.is_match(text)
    }
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pattern({:?})", self.source)
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Serialize for Pattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for Pattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let source = String::deserialize(d)?;
        Pattern::new(&source).map_err(serde::de::Error::custom)
    }
}

/// The value space of a single parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParamKind {
    Integer {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min: Option<i64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<i64>,
    },
    String {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pattern: Option<Pattern>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_len: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_len: Option<usize>,
    },
    HexAddress,
    Ipv4Target {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        cidrs: Vec<Ipv4Net>,
    },
    Enum {
        variants: Vec<String>,
    },
    Boolean,
    List {
        item: Box<ParamKind>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_items: Option<usize>,
    },
}

impl ParamKind {
    pub fn integer(min: Option<i64>, max: Option<i64>) -> Self {
        ParamKind::Integer { min, max }
    }

    pub fn string() -> Self {
        ParamKind::String {
            pattern: None,
            min_len: None,
            max_len: None,
        }
    }

    /// String fully matching `pattern`. Panics on an invalid pattern, so
    /// only use it with literals.
    pub fn string_matching(pattern: &str) -> Self {
        ParamKind::String {
            pattern: Some(Pattern::new(pattern).expect("literal pattern")),
            min_len: None,
            max_len: None,
        }
    }

    pub fn list_of(item: ParamKind) -> Self {
        ParamKind::List {
            item: Box::new(item),
            max_items: None,
        }
    }

    /// Human-readable statement of the constraint, used verbatim in violations.
    pub fn describe(&self) -> String {
        match self {
            ParamKind::Integer { min, max } => match (min, max) {
                (Some(lo), Some(hi)) => format!("integer in range {lo}-{hi}"),
                (Some(lo), None) => format!("integer >= {lo}"),
                (None, Some(hi)) => format!("integer <= {hi}"),
                (None, None) => "integer".to_string(),
            },
            ParamKind::String {
                pattern,
                min_len,
                max_len,
            } => {
                let mut s = "string".to_string();
                match (min_len, max_len) {
                    (Some(lo), Some(hi)) => s.push_str(&format!(" of length {lo}-{hi}")),
                    (Some(lo), None) => s.push_str(&format!(" of length >= {lo}")),
                    (None, Some(hi)) => s.push_str(&format!(" of length <= {hi}")),
                    (None, None) => {}
                }
                if let Some(p) = pattern {
                    s.push_str(&format!(" matching {}", p.as_str()));
                }
                s
            }
            ParamKind::HexAddress => format!("hex address matching {HEX_ADDRESS_PATTERN}"),
            ParamKind::Ipv4Target { cidrs } if cidrs.is_empty() => "IPv4 address".to_string(),
            ParamKind::Ipv4Target { cidrs } => {
                let blocks: Vec<String> = cidrs.iter().map(|c| c.to_string()).collect();
                format!("IPv4 address within {}", blocks.join(", "))
            }
            ParamKind::Enum { variants } => format!("one of {{{}}}", variants.join(", ")),
            ParamKind::Boolean => "boolean".to_string(),
            ParamKind::List { item, max_items } => match max_items {
                Some(n) => format!("list of at most {n} ({})", item.describe()),
                None => format!("list of ({})", item.describe()),
            },
        }
    }

    /// Whether `value` lies in this kind's value space.
    pub fn admits(&self, value: &Value) -> bool {
        match self {
            ParamKind::Integer { min, max } => match integer_value(value) {
                Some(v) => {
                    min.is_none_or(|lo| v >= i128::from(lo))
                        && max.is_none_or(|hi| v <= i128::from(hi))
                }
                None => false,
            },
            ParamKind::String {
                pattern,
                min_len,
                max_len,
            } => match value.as_str() {
                Some(s) => {
                    let len = s.chars().count();
                    min_len.is_none_or(|lo| len >= lo)
                        && max_len.is_none_or(|hi| len <= hi)
                        && pattern.as_ref().is_none_or(|p| p.is_full_match(s))
                }
                None => false,
            },
            ParamKind::HexAddress => value.as_str().is_some_and(is_hex_address),
            ParamKind::Ipv4Target { cidrs } => match value.as_str().and_then(parse_ipv4) {
                Some(addr) => cidrs.is_empty() || cidrs.iter().any(|c| c.contains(&addr)),
                None => false,
            },
            ParamKind::Enum { variants } => value
                .as_str()
                .is_some_and(|s| variants.iter().any(|v| v == s)),
            ParamKind::Boolean => value.is_boolean(),
            ParamKind::List { item, max_items } => match value.as_array() {
                Some(items) => {
                    max_items.is_none_or(|n| items.len() <= n)
                        && items.iter().all(|v| item.admits(v))
                }
                None => false,
            },
        }
    }

    fn check(&self, tool: &str, param: &str) -> Result<(), SchemaError> {
        match self {
            ParamKind::Integer {
                min: Some(lo),
                max: Some(hi),
            } if lo > hi => Err(SchemaError::InvertedRange {
                tool: tool.to_string(),
                param: param.to_string(),
                min: *lo,
                max: *hi,
            }),
            ParamKind::Enum { variants } if variants.is_empty() => Err(SchemaError::EmptyEnum {
                tool: tool.to_string(),
                param: param.to_string(),
            }),
            ParamKind::List { item, .. } => item.check(tool, param),
            _ => Ok(()),
        }
    }
}

/// Exact integers only: floats and numeric strings are not integers.
pub(crate) fn integer_value(value: &Value) -> Option<i128> {
    match value {
        Value::Number(n) => n
            .as_i64()
            .map(i128::from)
            .or_else(|| n.as_u64().map(i128::from)),
        _ => None,
    }
}

pub fn is_hex_address(s: &str) -> bool {
    s.len() > 2 && s.starts_with("0x") && s[2..].bytes().all(|b| b.is_ascii_hexdigit())
}

/// Strict dotted-quad parse (no leading zeros, no shorthand forms).
pub fn parse_ipv4(s: &str) -> Option<Ipv4Addr> {
    s.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(flatten)]
    pub kind: ParamKind,
    #[serde(default)]
    pub required: bool,
}

impl ParamSpec {
    pub fn required(name: &str, kind: ParamKind) -> Self {
        Self {
            name: name.to_string(),
            description: String::new(),
            kind,
            required: true,
        }
    }

    pub fn optional(name: &str, kind: ParamKind) -> Self {
        Self {
            required: false,
            ..Self::required(name, kind)
        }
    }

    pub fn describe(mut self, text: &str) -> Self {
        self.description = text.to_string();
        self
    }
}

/// A typed tool signature. Construction checks the schema invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ToolSchemaRepr", into = "ToolSchemaRepr")]
pub struct ToolSchema {
    tool_name: String,
    description: String,
    params: Vec<ParamSpec>,
    binary_param: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ToolSchemaRepr {
    tool_name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    params: Vec<ParamSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    binary_param: Option<String>,
}

impl TryFrom<ToolSchemaRepr> for ToolSchema {
    type Error = SchemaError;

    fn try_from(r: ToolSchemaRepr) -> Result<Self, Self::Error> {
        let mut schema = ToolSchema::new(&r.tool_name, &r.description, r.params)?;
        if let Some(p) = r.binary_param {
            schema = schema.with_binary_param(&p)?;
        }
        Ok(schema)
    }
}

impl From<ToolSchema> for ToolSchemaRepr {
    fn from(s: ToolSchema) -> Self {
        Self {
            tool_name: s.tool_name,
            description: s.description,
            params: s.params,
            binary_param: s.binary_param,
        }
    }
}

impl ToolSchema {
    pub fn new(
        tool_name: &str,
        description: &str,
        params: Vec<ParamSpec>,
    ) -> Result<Self, SchemaError> {
        if tool_name.trim().is_empty() {
            return Err(SchemaError::EmptyToolName);
        }
        let mut seen = BTreeSet::new();
        for p in &params {
            if !seen.insert(p.name.as_str()) {
                return Err(SchemaError::DuplicateParam {
                    tool: tool_name.to_string(),
                    param: p.name.clone(),
                });
            }
            p.kind.check(tool_name, &p.name)?;
        }
        Ok(Self {
            tool_name: tool_name.to_string(),
            description: description.to_string(),
            params,
            binary_param: None,
        })
    }

    /// Marks `param` as naming the executable this tool runs; scope
    /// enforcement checks it against the binary allow-list.
    pub fn with_binary_param(mut self, param: &str) -> Result<Self, SchemaError> {
        match self.param(param) {
            Some(ParamSpec {
                kind: ParamKind::String { .. },
                ..
            }) => {
                self.binary_param = Some(param.to_string());
                Ok(self)
            }
            _ => Err(SchemaError::BadBinaryParam {
                tool: self.tool_name.clone(),
                param: param.to_string(),
            }),
        }
    }

    pub fn tool_name(&self) -> &str {
        &self.tool_name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn binary_param(&self) -> Option<&str> {
        self.binary_param.as_deref()
    }
}

/// Opaque per-session call identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CallId(pub String);

impl CallId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CallId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A proposed action: one tool invocation with named arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: CallId,
    pub tool_name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
}

impl ToolCall {
    pub fn new(call_id: impl Into<String>, tool_name: &str, arguments: Value) -> Self {
        let arguments = match arguments {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                let mut m = Map::new();
                m.insert("value".to_string(), other);
                m
            }
        };
        Self {
            call_id: CallId::new(call_id),
            tool_name: tool_name.to_string(),
            arguments,
        }
    }
}
