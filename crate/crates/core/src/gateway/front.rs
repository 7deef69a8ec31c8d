//! The gateway's own wire endpoint, for agents running out of process.

use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;

use serde_json::json;

use super::{DispatchOutcome, Gateway, GatewayError};
use crate::protocol::schema::ToolCall;
use crate::protocol::wire::{
    decode_message, read_frame_bytes, write_frame, FrameError, Framing, MessageKind, WireMessage,
    TOOLS_CALL, TOOLS_LIST, TOOLS_REJECT, TOOLS_RESULT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Listen<'a> {
    Stdio,
    Tcp(&'a str),
}

impl<'a> Listen<'a> {
    /// Parses `stdio` or `tcp:<addr>`.
    pub fn parse(s: &'a str) -> Result<Self, String> {
        match s {
            "stdio" => Ok(Listen::Stdio),
            _ => s
                .strip_prefix("tcp:")
                .filter(|a| !a.is_empty())
                .map(Listen::Tcp)
                .ok_or_else(|| {
                    format!("listen address must be 'stdio' or 'tcp:<addr>', got '{s}'")
                }),
        }
    }
}

/// Serves one client until end of input. A trace failure ends the session.
pub fn serve_session<R: BufRead, W: Write>(
    gw: &mut Gateway,
    mut input: R,
    mut output: W,
    framing: Framing,
) -> Result<(), GatewayError> {
    let io_err = |e: io::Error| GatewayError::Transport(e.to_string());
    loop {
        let bytes = match read_frame_bytes(&mut input, framing) {
            Ok(Some(b)) => b,
            Ok(None) | Err(FrameError::Io(_)) => return Ok(()),
            Err(e) => {
                write_frame(
                    &mut output,
                    framing,
                    &WireMessage::error_response(None, "malformed-frame", &e.to_string()),
                )
                .map_err(io_err)?;
                continue;
            }
        };
        let msg = match decode_message(&bytes) {
            Ok(m) if m.kind == MessageKind::Request => m,
            Ok(_) => continue,
            Err(e) => {
                write_frame(
                    &mut output,
                    framing,
                    &WireMessage::error_response(None, "malformed-frame", &e.to_string()),
                )
                .map_err(io_err)?;
                continue;
            }
        };
        let id = msg.id.clone().expect("requests carry ids");
        let reply = match msg.method.as_deref() {
            Some(TOOLS_LIST) => WireMessage::response(id, TOOLS_LIST, gw.tools_list_payload()),
            Some(TOOLS_CALL) => match serde_json::from_value::<ToolCall>(msg.payload) {
                Ok(call) => match gw.dispatch(&call)? {
                    DispatchOutcome::Completed(r) => WireMessage::response(
                        id,
                        TOOLS_RESULT,
                        json!({"call_id": r.call_id, "output": r.output}),
                    ),
                    DispatchOutcome::Rejected(r) => WireMessage::response(
                        id,
                        TOOLS_REJECT,
                        serde_json::to_value(r).expect("rejection serializes"),
                    ),
                    DispatchOutcome::Failed(f) => {
                        let mut m = WireMessage::error_response(Some(id), &f.code, &f.message);
                        m.payload["call_id"] = json!(f.call_id);
                        m.payload["failure"] = json!(f.kind);
                        m
                    }
                },
                Err(e) => WireMessage::error_response(
                    Some(id),
                    "bad-request",
                    &format!("bad tools/call payload: {e}"),
                ),
            },
            Some(other) => WireMessage::error_response(
                Some(id),
                "unknown-method",
                &format!("method '{other}' is not served"),
            ),
            None => WireMessage::error_response(Some(id), "bad-request", "request without method"),
        };
        write_frame(&mut output, framing, &reply).map_err(io_err)?;
        output.flush().map_err(io_err)?;
    }
}

/// Serves on stdio, or accepts TCP clients one at a time.
pub fn listen(gw: &mut Gateway, on: Listen<'_>) -> Result<(), GatewayError> {
    match on {
        Listen::Stdio => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            serve_session(gw, stdin.lock(), stdout.lock(), Framing::Lines)
        }
        Listen::Tcp(addr) => {
            let listener = TcpListener::bind(addr)
                .map_err(|e| GatewayError::Transport(format!("cannot bind {addr}: {e}")))?;
            log::info!(
                "gateway listening on {}",
                listener
                    .local_addr()
                    .map(|a| a.to_string())
                    .unwrap_or_default()
            );
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let Ok(reader) = stream.try_clone() else {
                    continue;
                };
                serve_session(gw, BufReader::new(reader), stream, Framing::LengthPrefixed)?;
            }
            Ok(())
        }
    }
}
