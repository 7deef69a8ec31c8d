use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ctfgate_core::agent::{AgentConfig, Episode, StopKind};
use ctfgate_core::gateway::{
    EndpointDescriptor, EventKind, Gateway, MemorySink, ScopePolicy, Tracer,
};
use ctfgate_core::reasoner::remote::RENDERING_VERSION;
use ctfgate_core::reasoner::{
    Reasoner, ReasonerError, ReasonerRequest, RemoteConfig, RemoteReasoner,
};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: Value,
}

/// Serves the canned `(status, body)` replies in order, one per connection.
fn mock(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/propose", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let Ok((stream, _)) = listener.accept() else {
                return;
            };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => length = v.trim().parse().unwrap(),
                        "authorization" => authorization = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut buf = vec![0; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen {
                authorization,
                body: serde_json::from_slice(&buf).unwrap_or(Value::Null),
            });
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, seen)
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        key: Some("test-key".into()),
        request_timeout: Duration::from_secs(5),
        initial_backoff: Duration::from_millis(10),
        ..RemoteConfig::new(url)
    }
}

fn request() -> ReasonerRequest {
    ReasonerRequest {
        objective: "Find the flag".into(),
        step: 0,
        catalog: ctfgate_core::tools::catalog(),
        history: vec![],
        queue: vec![],
        active_task: Some("scan".into()),
        doc_pack: None,
        last_rejection: None,
    }
}

fn tool_use_reply(port: u64) -> String {
    json!({
        "model": "m",
        "stop_reason": "tool_use",
        "content": [
            {"type": "text", "text": "scanning"},
            {"type": "tool_use", "id": "t1", "name": "port_scan", "input": {"target": "10.0.0.5", "port": port}}
        ]
    })
    .to_string()
}

#[test]
fn rate_limit_is_retried() {
    let (url, seen) = mock(vec![(429, "{}".into()), (200, tool_use_reply(80))]);
    let mut r = RemoteReasoner::new(config(&url), None);
    let set = r.next_candidates(&request()).unwrap();
    assert_eq!(set.candidates.len(), 1);
    assert_eq!(set.candidates[0].tool_name, "port_scan");
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    assert_eq!(seen[1].authorization.as_deref(), Some("Bearer test-key"));
    assert_eq!(seen[1].body["version"], RENDERING_VERSION);
    assert!(seen[1].body["tools"]
        .as_array()
        .unwrap()
        .iter()
        .any(|t| t["name"] == "port_scan"));
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = mock(vec![
        (400, "{\"error\": \"bad\"}".into()),
        (200, tool_use_reply(80)),
    ]);
    let mut r = RemoteReasoner::new(config(&url), None);
    assert!(matches!(
        r.next_candidates(&request()),
        Err(ReasonerError::Failure { .. })
    ));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_fails_after_retries() {
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut r = RemoteReasoner::new(config(&format!("http://127.0.0.1:{port}/")), None);
    let err = r.next_candidates(&request()).unwrap_err();
    assert!(
        matches!(
            err,
            ReasonerError::Failure { .. } | ReasonerError::RateLimited { .. }
        ),
        "{err}"
    );
}

#[test]
fn malformed_reply_carries_its_digest() {
    let body =
        "{\"content\": [{\"type\": \"text\", \"text\": \"I would scan port 80\"}]}".to_string();
    let expected = ctfgate_core::digest(body.as_bytes());
    let (url, _seen) = mock(vec![(200, body)]);
    let mut r = RemoteReasoner::new(config(&url), None);
    let err = r.next_candidates(&request()).unwrap_err();
    assert_eq!(err.digest(), Some(expected.as_str()));
}

#[test]
fn plan_reply_in_text() {
    let body = json!({"choices": [{"message": {"content": "Plan: {\"tasks\": [\"recon\", \"exploit\"]}"}}]}).to_string();
    let (url, _seen) = mock(vec![(200, body)]);
    let mut r = RemoteReasoner::new(config(&url), None);
    assert_eq!(r.plan(&request()).unwrap(), ["recon", "exploit"]);
}

#[test]
fn remote_proposal_is_still_gated() {
    let replies = vec![
        (200, json!({"tasks": ["scan the host"]}).to_string()),
        (200, tool_use_reply(70000)),
        (
            200,
            json!({"candidates": [], "rationale": "giving up"}).to_string(),
        ),
    ];
    let (url, _seen) = mock(replies);
    let mut reasoner = RemoteReasoner::new(config(&url), None);
    let sink = MemorySink::default();
    let policy: ScopePolicy =
        serde_json::from_value(json!({"allowed_cidrs": ["10.0.0.0/24"], "allowed_binaries": []}))
            .unwrap();
    let mut gw = Gateway::new(
        policy,
        Tracer::new("remote", Box::new(sink.clone())),
        Path::new("/"),
    );
    gw.register_server(EndpointDescriptor {
        server: "echo".into(),
        command: vec![
            env!("CARGO_BIN_EXE_ctfgate-tool").into(),
            "echo".into(),
            "port_scan".into(),
        ],
        env: BTreeMap::new(),
        tools: vec![],
    })
    .unwrap();
    let cfg = AgentConfig {
        checkpoint_every: None,
        ..AgentConfig::default()
    };
    let stop = Episode::new("Find the flag", cfg, &mut gw, &mut reasoner)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(stop.kind, StopKind::SearchExhausted);
    assert_eq!(gw.forwarded_calls(), 0);
    let events = sink.events();
    assert!(events.iter().any(|e| e.kind == EventKind::Rejection));
    assert!(!events.iter().any(|e| e.kind == EventKind::Result));
    // The reply metadata is recorded for replay.
    assert!(events.iter().any(|e| e.kind == EventKind::PlanUpdate
        && e.payload["reason"] == "reasoner-reply"
        && e.payload["meta"]["model"] == "m"));
}
