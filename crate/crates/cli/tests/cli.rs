use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use ctfgate_core::protocol::wire::{TOOLS_CALL, TOOLS_LIST, TOOLS_REJECT, TOOLS_RESULT};
use ctfgate_core::protocol::{decode_message, encode_message, WireMessage};
use serde_json::{json, Value};

const CTFGATE: &str = env!("CARGO_BIN_EXE_ctfgate");
const WORKSPACE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../..");

fn ctfgate(args: &[&str]) -> Output {
    Command::new(CTFGATE).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_policy(dir: &Path) -> PathBuf {
    let p = dir.join("policy.toml");
    std::fs::write(
        &p,
        "allowed_cidrs = [\"10.0.0.0/24\"]\nallowed_binaries = [\"/bin/echo\"]\nmax_wall_time_seconds = 30\n",
    )
    .unwrap();
    p
}

fn write_script(dir: &Path, words: &[&str]) -> PathBuf {
    let mut steps = vec![json!({"plan": ["say it"]})];
    for w in words {
        steps.push(json!({"propose": {"candidates": [
            {"tool_name": "run_command", "arguments": {"binary": "/bin/echo", "args": [w]}}
        ]}}));
    }
    let p = dir.join("script.json");
    std::fs::write(&p, json!({ "steps": steps }).to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_subcommands() {
    let o = ctfgate(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in ["serve", "gateway", "episode", "bench"] {
        assert!(text.contains(sub), "{text}");
    }
}

#[test]
fn unknown_server_kind_fails() {
    let o = ctfgate(&["serve", "nope"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope"), "{}", stderr(&o));
}

#[test]
fn episode_captures_the_flag_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let policy = write_policy(dir.path());
    let script = write_script(dir.path(), &["warming up", "flag{cli}"]);
    let trace = dir.path().join("trace.jsonl");
    let reasoner = format!("scripted:{}", s(&script));
    let args = [
        "episode",
        "--reasoner",
        &reasoner,
        "--policy",
        s(&policy),
        "--trace",
        s(&trace),
        "--workdir",
        s(dir.path()),
        "--timeout-min",
        "1",
    ];
    let o = ctfgate(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let stop: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stop["kind"], "flag-captured");
    assert_eq!(stop["flag"], "flag{cli}");
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(
        text.lines().any(|l| l.contains("\"kind\":\"stop\"")),
        "{text}"
    );

    let again = ctfgate(&args);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("already exists"));
}

#[test]
fn episode_resumes_from_its_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let policy = write_policy(dir.path());
    let words: Vec<String> = (0..6)
        .map(|i| format!("step-{i}"))
        .chain(["flag{again}".into()])
        .collect();
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let script = write_script(dir.path(), &refs);
    let trace = dir.path().join("trace.jsonl");
    let ckpt = dir.path().join("trace.ckpt");
    let reasoner = format!("scripted:{}", s(&script));
    let base = [
        "episode",
        "--reasoner",
        &reasoner,
        "--policy",
        s(&policy),
        "--trace",
        s(&trace),
        "--workdir",
        s(dir.path()),
        "--checkpoint-every-min",
        "0.00001",
    ];
    let o = ctfgate(&base);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ckpt.exists());

    let mut resume = base.to_vec();
    resume.extend(["--resume", s(&ckpt)]);
    let o = ctfgate(&resume);
    assert!(o.status.success(), "{}", stderr(&o));
    let stop: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stop["kind"], "flag-captured");
    // Sequence numbers stay contiguous across the resume.
    let seqs: Vec<u64> = std::fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["seq"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "{seqs:?}");
}

#[test]
fn bad_reasoner_spec_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let policy = write_policy(dir.path());
    let trace = dir.path().join("t.jsonl");
    let o = ctfgate(&[
        "episode",
        "--reasoner",
        "oracle",
        "--policy",
        s(&policy),
        "--trace",
        s(&trace),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("scripted:<path>"), "{}", stderr(&o));
}

#[test]
fn gateway_serves_stdio() {
    let dir = tempfile::tempdir().unwrap();
    let policy = write_policy(dir.path());
    let trace = dir.path().join("gw.jsonl");
    let mut child = Command::new(CTFGATE)
        .args([
            "gateway",
            "--policy",
            s(&policy),
            "--trace",
            s(&trace),
            "--workdir",
            s(dir.path()),
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut stdin = child.stdin.take().unwrap();
        let requests = [
            WireMessage::request(1, TOOLS_LIST, json!({})),
            WireMessage::request(
                2,
                TOOLS_CALL,
                json!({"call_id": "g1", "tool_name": "port_scan", "arguments": {"target": "10.0.0.5", "port": 70000}}),
            ),
            WireMessage::request(
                3,
                TOOLS_CALL,
                json!({"call_id": "g2", "tool_name": "run_command", "arguments": {"binary": "/bin/echo", "args": ["hi"]}}),
            ),
        ];
        for r in &requests {
            stdin.write_all(&encode_message(r)).unwrap();
            stdin.write_all(b"\n").unwrap();
        }
    }
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let replies: Vec<WireMessage> = o
        .stdout
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| decode_message(l).unwrap())
        .collect();
    assert_eq!(replies.len(), 3);
    assert_eq!(replies[0].method.as_deref(), Some(TOOLS_LIST));
    let tools = replies[0].payload["tools"].as_array().unwrap();
    assert!(tools.iter().any(|t| t["tool_name"] == "port_scan"));
    assert_eq!(replies[1].method.as_deref(), Some(TOOLS_REJECT));
    assert!(replies[1].payload.to_string().contains("1-65535"));
    assert_eq!(replies[2].method.as_deref(), Some(TOOLS_RESULT));
    assert!(replies[2].payload["output"].to_string().contains("hi"));
}

#[test]
fn bench_stats_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let suite = Path::new(WORKSPACE).join("assets/suite");
    let docpacks = Path::new(WORKSPACE).join("assets/docpacks");
    let sandboxes = dir.path().join("sb");
    let run = [
        "bench",
        "run",
        "--suite",
        s(&suite),
        "--docpacks",
        s(&docpacks),
        "--conditions",
        "baseline,minimal",
        "--trials",
        "1",
        "--workers",
        "4",
        "--timeout-min",
        "1",
        "--out",
        s(&out),
        "--sandbox-root",
        s(&sandboxes),
    ];
    let o = ctfgate(&run);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(
        table.contains("Baseline") && table.contains("Minimal"),
        "{table}"
    );
    let first = std::fs::read_to_string(out.join("conditions.csv")).unwrap();
    assert_eq!(first.lines().count(), 3);

    let again = dir.path().join("again");
    let o = ctfgate(&["bench", "stats", "--in", s(&out), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(again.join("conditions.csv")).unwrap(),
        first
    );

    let o = ctfgate(&run);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("already exists"));
}

#[test]
fn bench_stats_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctfgate(&["bench", "stats", "--in", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("trials.jsonl"), "{}", stderr(&o));
}
