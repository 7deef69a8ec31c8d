//! Envelope and framing for tool-server RPC.
//!
//! A frame is one UTF-8 JSON object:
//!
//! ```text
//! {"v":"1","kind":"request","id":7,"method":"tools/call","payload":{...}}
//! ```
//!
//! On stdio, frames are separated by `\n` (compact JSON never contains a raw
//! newline). On TCP, each frame is preceded by its byte length written as
//! exactly 8 ASCII decimal digits.

use std::fmt;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const PROTOCOL_VERSION: &str = "1";

pub const TOOLS_LIST: &str = "tools/list";
pub const TOOLS_CALL: &str = "tools/call";
pub const TOOLS_RESULT: &str = "tools/result";
pub const TOOLS_REJECT: &str = "tools/reject";

/// Largest frame either transport will read.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;
const LENGTH_HEADER_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    Request,
    Response,
    ErrorResponse,
    Notification,
}

impl MessageKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "request" => Self::Request,
            "response" => Self::Response,
            "error-response" => Self::ErrorResponse,
            "notification" => Self::Notification,
            _ => return None,
        })
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::Request => "request",
            Self::Response => "response",
            Self::ErrorResponse => "error-response",
            Self::Notification => "notification",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageId {
    Num(u64),
    Str(String),
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MessageId::Num(n) => write!(f, "{n}"),
            MessageId::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub id: Option<MessageId>,
    pub method: Option<String>,
    pub payload: Value,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
}

impl WireMessage {
    pub fn request(id: u64, method: &str, payload: Value) -> Self {
        Self {
            kind: MessageKind::Request,
            id: Some(MessageId::Num(id)),
            method: Some(method.to_string()),
            payload,
        }
    }

    pub fn response(id: MessageId, method: &str, payload: Value) -> Self {
        Self {
            kind: MessageKind::Response,
            id: Some(id),
            method: Some(method.to_string()),
            payload,
        }
    }

    pub fn error_response(id: Option<MessageId>, code: &str, message: &str) -> Self {
        let mut payload = Map::new();
        payload.insert("code".into(), Value::String(code.into()));
        payload.insert("message".into(), Value::String(message.into()));
        Self {
            kind: MessageKind::ErrorResponse,
            id,
            method: None,
            payload: Value::Object(payload),
        }
    }

    pub fn notification(method: &str, payload: Value) -> Self {
        Self {
            kind: MessageKind::Notification,
            id: None,
            method: Some(method.to_string()),
            payload,
        }
    }

    /// The envelope rules every decoded message satisfies.
    pub fn check(&self) -> Result<(), String> {
        match self.kind {
            MessageKind::Request if self.id.is_none() => Err("request without id".into()),
            MessageKind::Request if self.method.is_none() => Err("request without method".into()),
            MessageKind::Response if self.id.is_none() => Err("response without id".into()),
            MessageKind::Notification if self.method.is_none() => {
                Err("notification without method".into())
            }
            MessageKind::Notification if self.id.is_some() => Err("notification with id".into()),
            _ => Ok(()),
        }
    }

    /// The `{code, message}` pair of an error response.
    pub fn error_parts(&self) -> Option<(&str, &str)> {
        if self.kind != MessageKind::ErrorResponse {
            return None;
        }
        let code = self
            .payload
            .get("code")
            .and_then(Value::as_str)
            .unwrap_or("error");
        let message = self
            .payload
            .get("message")
            .and_then(Value::as_str)
            .unwrap_or("");
        Some((code, message))
    }
}

/// Serializes one frame body (no delimiter or length header).
pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let mut obj = Map::new();
    obj.insert("v".into(), Value::String(PROTOCOL_VERSION.into()));
    obj.insert("kind".into(), Value::String(msg.kind.as_str().into()));
    if let Some(id) = &msg.id {
        obj.insert(
            "id".into(),
            serde_json::to_value(id).expect("id serializes"),
        );
    }
    if let Some(method) = &msg.method {
        obj.insert("method".into(), Value::String(method.clone()));
    }
    obj.insert("payload".into(), msg.payload.clone());
    serde_json::to_vec(&Value::Object(obj)).expect("json values serialize")
}

/// Parses one frame body. A single trailing newline is tolerated.
pub fn decode_message(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    let value: Value =
        serde_json::from_slice(body).map_err(|e| DecodeError::MalformedFrame(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(DecodeError::ProtocolViolation(
            "frame is not an object".into(),
        ));
    };
    let violation = |m: &str| DecodeError::ProtocolViolation(m.to_string());

    match obj.get("v") {
        Some(Value::String(v)) if v == PROTOCOL_VERSION => {}
        Some(_) => return Err(violation("unsupported protocol version")),
        None => return Err(violation("missing version field 'v'")),
    }
    let kind = match obj.get("kind") {
        Some(Value::String(k)) => {
            MessageKind::parse(k).ok_or_else(|| violation("unknown message kind"))?
        }
        _ => return Err(violation("missing or non-string 'kind'")),
    };
    let id = match obj.remove("id") {
        None | Some(Value::Null) => None,
        Some(Value::Number(n)) => {
            Some(MessageId::Num(n.as_u64().ok_or_else(|| {
                violation("numeric id must be a nonnegative integer")
            })?))
        }
        Some(Value::String(s)) => Some(MessageId::Str(s)),
        Some(_) => return Err(violation("id must be a number or string")),
    };
    let method = match obj.remove("method") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(violation("method must be a string")),
    };
    let payload = obj.remove("payload").unwrap_or(Value::Null);

    let msg = WireMessage {
        kind,
        id,
        method,
        payload,
    };
    msg.check().map_err(DecodeError::ProtocolViolation)?;
    Ok(msg)
}

/// How frames are delimited on a byte stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    /// Newline-delimited (stdio).
    Lines,
    /// 8-digit decimal length header (TCP).
    LengthPrefixed,
}

pub fn write_frame<W: Write>(w: &mut W, framing: Framing, msg: &WireMessage) -> io::Result<usize> {
    let body = encode_message(msg);
    let written = match framing {
        Framing::Lines => {
            w.write_all(&body)?;
            w.write_all(b"\n")?;
            body.len() + 1
        }
        Framing::LengthPrefixed => {
            if body.len() >= 100_000_000 {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidInput,
                    "frame too large for length header",
                ));
            }
            w.write_all(format!("{:08}", body.len()).as_bytes())?;
            w.write_all(&body)?;
            body.len() + LENGTH_HEADER_BYTES
        }
    };
    w.flush()?;
    Ok(written)
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: BufRead>(
    r: &mut R,
    framing: Framing,
) -> Result<Option<WireMessage>, FrameError> {
    match read_frame_bytes(r, framing)? {
        Some(bytes) => Ok(Some(decode_message(&bytes)?)),
        None => Ok(None),
    }
}

pub fn read_frame_bytes<R: BufRead>(
    r: &mut R,
    framing: Framing,
) -> Result<Option<Vec<u8>>, FrameError> {
    match framing {
        Framing::Lines => {
            let mut buf = Vec::new();
            let n = r
                .by_ref()
                .take(MAX_FRAME_BYTES as u64 + 1)
                .read_until(b'\n', &mut buf)?;
            if n == 0 {
                return Ok(None);
            }
            if buf.len() > MAX_FRAME_BYTES {
                return Err(FrameError::TooLarge(buf.len()));
            }
            Ok(Some(buf))
        }
        Framing::LengthPrefixed => {
            let mut header = [0u8; LENGTH_HEADER_BYTES];
            match r.read_exact(&mut header) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
                Err(e) => return Err(e.into()),
            }
            let len: usize = std::str::from_utf8(&header)
                .ok()
                .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DecodeError::MalformedFrame("bad length header".into()))?;
            if len > MAX_FRAME_BYTES {
                return Err(FrameError::TooLarge(len));
            }
            let mut body = vec![0u8; len];
            r.read_exact(&mut body)?;
            Ok(Some(body))
        }
    }
}
