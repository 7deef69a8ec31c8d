//! GDB/MI output-record parser.
//!
//! ```text
//! record       = [token] ( "^" result-class | "*" | "+" | "=" async-class ) ( "," result )*
//!              | ( "~" | "@" | "&" ) c-string
//!              | "(gdb)" [" "]
//! result       = variable "=" value
//! value        = c-string | "{" [ result ( "," result )* ] "}"
//!              | "[" [ value ( "," value )* | result ( "," result )* ] "]"
//! ```

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordClass {
    Result,
    ExecAsync,
    StatusAsync,
    NotifyAsync,
    ConsoleStream,
    TargetStream,
    LogStream,
    Prompt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResultClass {
    Done,
    Running,
    Connected,
    Error,
    Exit,
    Stopped,
}

impl ResultClass {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "done" => Self::Done,
            "running" => Self::Running,
            "connected" => Self::Connected,
            "error" => Self::Error,
            "exit" => Self::Exit,
            "stopped" => Self::Stopped,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Done => "done",
            Self::Running => "running",
            Self::Connected => "connected",
            Self::Error => "error",
            Self::Exit => "exit",
            Self::Stopped => "stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "kebab-case")]
pub enum MiValue {
    Const(String),
    Tuple(Vec<(String, MiValue)>),
    List(Vec<MiValue>),
    /// A list whose elements are `name=value` results (e.g. `stack=[frame={..},..]`).
    ResultList(Vec<(String, MiValue)>),
}

impl MiValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            MiValue::Const(s) => Some(s),
            _ => None,
        }
    }

    /// First field named `name` in a tuple or result list.
    pub fn get(&self, name: &str) -> Option<&MiValue> {
        match self {
            MiValue::Tuple(fields) | MiValue::ResultList(fields) => {
                fields.iter().find(|(k, _)| k == name).map(|(_, v)| v)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiRecord {
    pub token: Option<u64>,
    pub record_class: RecordClass,
    /// Set on result records, and on exec-async `running`/`stopped`.
    pub result_class: Option<ResultClass>,
    /// Class word of async records (`stopped`, `thread-group-added`, ...).
    pub async_class: Option<String>,
    pub fields: Vec<(String, MiValue)>,
    /// Decoded text of stream records.
    pub text: Option<String>,
}

impl MiRecord {
    pub fn field(&self, name: &str) -> Option<&MiValue> {
        self.fields.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn field_str(&self, name: &str) -> Option<&str> {
        self.field(name).and_then(MiValue::as_str)
    }

    pub fn is_prompt(&self) -> bool {
        self.record_class == RecordClass::Prompt
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("MI parse error at byte {offset}: {message}")]
pub struct MiParseError {
    pub offset: usize,
    pub message: String,
}

pub fn parse_mi_record(line: &str) -> Result<MiRecord, MiParseError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.trim_end() == "(gdb)" {
        return Ok(MiRecord {
            token: None,
            record_class: RecordClass::Prompt,
            result_class: None,
            async_class: None,
            fields: Vec::new(),
            text: None,
        });
    }
    let mut p = Parser {
        s: line.as_bytes(),
        pos: 0,
    };
    let token = p.token()?;
    let marker = p.next().ok_or_else(|| p.err("empty record"))?;
    let record_class = match marker {
        b'^' => RecordClass::Result,
        b'*' => RecordClass::ExecAsync,
        b'+' => RecordClass::StatusAsync,
        b'=' => RecordClass::NotifyAsync,
        b'~' => RecordClass::ConsoleStream,
        b'@' => RecordClass::TargetStream,
        b'&' => RecordClass::LogStream,
        _ => {
            p.pos -= 1;
            return Err(p.err("unknown record marker"));
        }
    };
    let mut rec = MiRecord {
        token,
        record_class,
        result_class: None,
        async_class: None,
        fields: Vec::new(),
        text: None,
    };
    match record_class {
        RecordClass::ConsoleStream | RecordClass::TargetStream | RecordClass::LogStream => {
            if token.is_some() {
                return Err(MiParseError {
                    offset: 0,
                    message: "stream records take no token".into(),
                });
            }
            rec.text = Some(p.c_string()?);
        }
        _ => {
            let class_start = p.pos;
            let class = p.identifier()?;
            if record_class == RecordClass::Result {
                rec.result_class = Some(ResultClass::parse(&class).ok_or(MiParseError {
                    offset: class_start,
                    message: format!("unknown result class '{class}'"),
                })?);
            } else {
                if record_class == RecordClass::ExecAsync {
                    rec.result_class = ResultClass::parse(&class)
                        .filter(|c| matches!(c, ResultClass::Running | ResultClass::Stopped));
                }
                rec.async_class = Some(class);
            }
            while p.eat(b',') {
                rec.fields.push(p.result()?);
            }
        }
    }
    if p.pos != p.s.len() {
        return Err(p.err("trailing bytes after record"));
    }
    Ok(rec)
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, message: &str) -> MiParseError {
        MiParseError {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn next(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    fn eat(&mut self, b: u8) -> bool {
        if self.peek() == Some(b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, b: u8) -> Result<(), MiParseError> {
        if self.eat(b) {
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", b as char)))
        }
    }

    fn token(&mut self) -> Result<Option<u64>, MiParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Ok(None);
        }
        let digits = std::str::from_utf8(&self.s[start..self.pos]).expect("ascii digits");
        digits.parse().map(Some).map_err(|_| MiParseError {
            offset: start,
            message: "token out of range".into(),
        })
    }

    fn identifier(&mut self) -> Result<String, MiParseError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected identifier"));
        }
        Ok(String::from_utf8_lossy(&self.s[start..self.pos]).into_owned())
    }

    fn result(&mut self) -> Result<(String, MiValue), MiParseError> {
        let name = self.identifier()?;
        self.expect(b'=')?;
        Ok((name, self.value()?))
    }

    fn value(&mut self) -> Result<MiValue, MiParseError> {
        match self.peek() {
            Some(b'"') => Ok(MiValue::Const(self.c_string()?)),
            Some(b'{') => {
                self.pos += 1;
                let mut fields = Vec::new();
                if !self.eat(b'}') {
                    loop {
                        fields.push(self.result()?);
                        if self.eat(b'}') {
                            break;
                        }
                        self.expect(b',')?;
                    }
                }
                Ok(MiValue::Tuple(fields))
            }
            Some(b'[') => {
                self.pos += 1;
                if self.eat(b']') {
                    return Ok(MiValue::List(Vec::new()));
                }
                if matches!(self.peek(), Some(b'"' | b'{' | b'[')) {
                    let mut items = Vec::new();
                    loop {
                        items.push(self.value()?);
                        if self.eat(b']') {
                            return Ok(MiValue::List(items));
                        }
                        self.expect(b',')?;
                    }
                }
                let mut items = Vec::new();
                loop {
                    items.push(self.result()?);
                    if self.eat(b']') {
                        return Ok(MiValue::ResultList(items));
                    }
                    self.expect(b',')?;
                }
            }
            _ => Err(self.err("expected value")),
        }
    }

    fn c_string(&mut self) -> Result<String, MiParseError> {
        self.expect(b'"')?;
        let mut out: Vec<u8> = Vec::new();
        loop {
            let b = self.next().ok_or_else(|| self.err("unterminated string"))?;
            match b {
                b'"' => break,
                b'\\' => {
                    let esc = self.next().ok_or_else(|| self.err("unterminated escape"))?;
                    match esc {
                        b'n' => out.push(b'\n'),
                        b't' => out.push(b'\t'),
                        b'r' => out.push(b'\r'),
                        b'a' => out.push(0x07),
                        b'b' => out.push(0x08),
                        b'f' => out.push(0x0c),
                        b'v' => out.push(0x0b),
                        b'e' => out.push(0x1b),
                        b'0'..=b'7' => {
                            let mut v = u32::from(esc - b'0');
                            for _ in 0..2 {
                                match self.peek() {
                                    Some(d @ b'0'..=b'7') => {
                                        v = v * 8 + u32::from(d - b'0');
                                        self.pos += 1;
                                    }
                                    _ => break,
                                }
                            }
                            out.push((v & 0xff) as u8);
                        }
                        other => out.push(other),
                    }
                }
                other => out.push(other),
            }
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }
}

/// Renders a record back to one MI line (without the trailing newline).
pub fn to_mi_line(rec: &MiRecord) -> String {
    let mut s = String::new();
    if let Some(t) = rec.token {
        let _ = write!(s, "{t}");
    }
    let marker = match rec.record_class {
        RecordClass::Prompt => return "(gdb) ".to_string(),
        RecordClass::Result => '^',
        RecordClass::ExecAsync => '*',
        RecordClass::StatusAsync => '+',
        RecordClass::NotifyAsync => '=',
        RecordClass::ConsoleStream => '~',
        RecordClass::TargetStream => '@',
        RecordClass::LogStream => '&',
    };
    s.push(marker);
    if let Some(text) = &rec.text {
        write_c_string(&mut s, text);
        return s;
    }
    match (rec.record_class, rec.result_class, &rec.async_class) {
        (RecordClass::Result, Some(rc), _) => s.push_str(rc.as_str()),
        (_, _, Some(class)) => s.push_str(class),
        _ => {}
    }
    for (k, v) in &rec.fields {
        s.push(',');
        write_result(&mut s, k, v);
    }
    s
}

fn write_result(s: &mut String, k: &str, v: &MiValue) {
    s.push_str(k);
    s.push('=');
    write_value(s, v);
}

fn write_value(s: &mut String, v: &MiValue) {
    match v {
        MiValue::Const(c) => write_c_string(s, c),
        MiValue::Tuple(fields) => {
            s.push('{');
            for (i, (k, v)) in fields.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write_result(s, k, v);
            }
            s.push('}');
        }
        MiValue::List(items) => {
            s.push('[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write_value(s, v);
            }
            s.push(']');
        }
        MiValue::ResultList(items) => {
            s.push('[');
            for (i, (k, v)) in items.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                write_result(s, k, v);
            }
            s.push(']');
        }
    }
}

fn write_c_string(s: &mut String, text: &str) {
    s.push('"');
    for ch in text.chars() {
        match ch {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\t' => s.push_str("\\t"),
            '\r' => s.push_str("\\r"),
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                let _ = write!(s, "\\{:03o}", c as u32);
            }
            c => s.push(c),
        }
    }
    s.push('"');
}

impl fmt::Display for MiRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&to_mi_line(self))
    }
}
