use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use ctfgate_core::gateway::ScopePolicy;
use ctfgate_core::tools::command::{run_command, CommandError, CommandSpec};
use ctfgate_core::tools::debug::GdbSession;
use ctfgate_core::tools::mi::{parse_mi_record, to_mi_line, RecordClass, ResultClass};
use ctfgate_core::tools::scan::{parse_scan_report, ScanError};
use ctfgate_core::tools::triage::{triage_classify, Category};
use proptest::prelude::*;
use serde_json::{json, Value};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

fn compile(src: &str, out_dir: &Path, extra: &[&str]) -> PathBuf {
    let out = out_dir.join(Path::new(src).file_stem().unwrap());
    let result = Command::new("gcc")
        .args(["-O0", "-w", "-fno-stack-protector", "-no-pie"])
        .args(extra)
        .arg("-o")
        .arg(&out)
        .arg(fixture(&format!("c/{src}")))
        .output()
        .expect("gcc is required for the tool fixtures");
    assert!(
        result.status.success(),
        "failed to compile {src}: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    out
}

fn policy(bins: &[&str]) -> ScopePolicy {
    serde_json::from_value(json!({"allowed_binaries": bins})).unwrap()
}

// ---- MI parser ----

fn corpus_lines() -> Vec<String> {
    let mut lines = Vec::new();
    for name in ["session.mi", "tok.mi", "eval.mi"] {
        let text = std::fs::read_to_string(fixture(&format!("mi/{name}"))).unwrap();
        lines.extend(text.lines().map(str::to_string));
    }
    lines
}

#[test]
fn corpus_parses_and_round_trips() {
    let lines = corpus_lines();
    assert!(lines.len() > 150);
    for line in &lines {
        let rec = parse_mi_record(line).unwrap_or_else(|e| panic!("{line}: {e}"));
        let again = parse_mi_record(&to_mi_line(&rec)).unwrap();
        assert_eq!(again, rec, "{line}");
    }
}

#[test]
fn recorded_examples() {
    let lines = corpus_lines();
    let done = lines
        .iter()
        .find(|l| l.as_str() == "^done,value=\"42\"")
        .unwrap();
    let rec = parse_mi_record(done).unwrap();
    assert_eq!(rec.record_class, RecordClass::Result);
    assert_eq!(rec.result_class, Some(ResultClass::Done));
    assert_eq!(rec.field_str("value"), Some("42"));

    let stopped = lines
        .iter()
        .find(|l| l.starts_with("*stopped,reason=\"breakpoint-hit\""))
        .unwrap();
    let rec = parse_mi_record(stopped).unwrap();
    assert_eq!(rec.record_class, RecordClass::ExecAsync);
    assert_eq!(
        rec.field("frame")
            .and_then(|f| f.get("func"))
            .and_then(|v| v.as_str()),
        Some("accumulate")
    );

    assert!(parse_mi_record("(gdb) ").unwrap().is_prompt());
}

proptest! {
    #[test]
    fn mi_parser_is_total(line in ".{0,80}") {
        let _ = parse_mi_record(&line);
    }

    #[test]
    fn mi_parser_is_total_on_near_miss_input(
        prefix in prop_oneof![Just(""), Just("^"), Just("*"), Just("="), Just("~"), Just("12^"), Just("&")],
        body in "[a-z\\-]{0,8}(,[a-z]{1,4}=(\"[^\"]{0,6}\"?|\\{|\\[|\\]|\\}){0,3}){0,4}",
    ) {
        let _ = parse_mi_record(&format!("{prefix}{body}"));
    }
}

// ---- scan reports ----

#[test]
fn golden_reports() {
    for name in ["one_open_ssh", "zero_ports", "multi_host"] {
        let doc = std::fs::read_to_string(fixture(&format!("scan/{name}.xml"))).unwrap();
        let expected: Value = serde_json::from_str(
            &std::fs::read_to_string(fixture(&format!("scan/{name}.json"))).unwrap(),
        )
        .unwrap();
        let got = serde_json::to_value(parse_scan_report(&doc).unwrap()).unwrap();
        assert_eq!(got, expected, "{name}");
    }
}

#[test]
fn truncated_golden_is_parse_error() {
    let doc = std::fs::read_to_string(fixture("scan/one_open_ssh.xml")).unwrap();
    for cut in [doc.len() / 2, doc.len() - 12] {
        assert!(
            matches!(
                parse_scan_report(&doc[..cut]),
                Err(ScanError::ParseError { .. })
            ),
            "cut at {cut}"
        );
    }
}

proptest! {
    #[test]
    fn generated_documents_report_every_open_port(
        states in proptest::collection::btree_map(1u16..=65535, prop_oneof![
            Just("open"), Just("closed"), Just("filtered"), Just("open|filtered"), Just("unfiltered")
        ], 0..30)
    ) {
        let ports: String = states
            .iter()
            .map(|(p, s)| format!(r#"<port protocol="tcp" portid="{p}"><state state="{s}" reason="x"/></port>"#))
            .collect();
        let doc = format!(
            r#"<?xml version="1.0"?><nmaprun scanner="nmap"><host><address addr="10.0.0.7" addrtype="ipv4"/><ports>{ports}</ports></host></nmaprun>"#
        );
        let k = states.values().filter(|s| **s == "open").count();
        let r = parse_scan_report(&doc).unwrap();
        prop_assert_eq!(r[0].open_ports().count(), k);
        prop_assert_eq!(r[0].ports.len(), states.len());
    }
}

// ---- heap inspection against a live debugger ----

/// glibc x86-64 chunk sizes for the fixture's malloc(24) and malloc(100).
const EXPECTED_CHUNK_SIZES: [u64; 2] = [32, 112];

#[test]
fn heap_of_two_allocations() {
    let dir = tempfile::tempdir().unwrap();
    let bin = compile("two_allocs.c", dir.path(), &["-g"]);
    let t = Duration::from_secs(30);
    let mut s = GdbSession::launch(Path::new("/usr/bin/gdb"), dir.path(), t).unwrap();
    let stop = s
        .start(
            bin.to_str().unwrap(),
            &[],
            None,
            &["stop_here".to_string()],
            t,
        )
        .unwrap();
    assert_eq!(stop.reason.as_deref(), Some("breakpoint-hit"));
    assert_eq!(stop.function.as_deref(), Some("stop_here"));

    assert!(s.inspect_heap(0, t).unwrap().chunks.is_empty());
    let r = s.inspect_heap(10, t).unwrap();
    assert_eq!(r.walk_error, None);
    let sizes: Vec<u64> = r.chunks.iter().map(|c| c.size).collect();
    assert_eq!(sizes, EXPECTED_CHUNK_SIZES);
    assert!(r.chunks.iter().all(|c| c.in_use));
    assert_eq!(r.chunks[0].preview, "41".repeat(16));
    assert_eq!(r.chunks[1].preview, "42".repeat(16));
    let addrs: Vec<u64> = r
        .chunks
        .iter()
        .map(|c| u64::from_str_radix(&c.address[2..], 16).unwrap())
        .collect();
    assert!(addrs[0] < addrs[1]);
    let used: u64 = r.chunks.iter().filter(|c| c.in_use).map(|c| c.size).sum();
    assert!(used <= r.arena_size);
    assert_eq!(s.inspect_heap(1, t).unwrap().chunks.len(), 1);
    s.stop();
}

// ---- command execution ----

#[test]
fn strings_finds_embedded_flag() {
    let dir = tempfile::tempdir().unwrap();
    let bin = compile("embedded_flag.c", dir.path(), &[]);
    let spec = CommandSpec {
        binary: "/usr/bin/strings".into(),
        args: vec![bin.to_string_lossy().into_owned()],
        stdin: None,
        timeout: Duration::from_secs(10),
    };
    let r = run_command(&spec, &policy(&["/usr/bin/strings"]), dir.path()).unwrap();
    assert_eq!(r.exit_code, 0);
    assert!(r.stdout.contains("flag{x}"));
}

#[test]
fn rm_is_not_allowed() {
    let spec = CommandSpec {
        binary: "/bin/rm".into(),
        args: vec!["-f".into(), "/tmp/nothing".into()],
        stdin: None,
        timeout: Duration::from_secs(1),
    };
    let err = run_command(&spec, &policy(&["/usr/bin/strings"]), Path::new("/tmp")).unwrap_err();
    assert!(matches!(err, CommandError::ScopeViolation(_)));
}

fn processes_with_arg(marker: &str) -> Vec<u32> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<u32>() else {
            continue;
        };
        let Ok(cmdline) = std::fs::read(entry.path().join("cmdline")) else {
            continue;
        };
        let zombie = std::fs::read_to_string(entry.path().join("stat"))
            .map(|s| {
                s.rsplit(')')
                    .next()
                    .unwrap_or("")
                    .trim_start()
                    .starts_with('Z')
            })
            .unwrap_or(true);
        if !zombie && cmdline.split(|b| *b == 0).any(|a| a == marker.as_bytes()) {
            found.push(pid);
        }
    }
    found
}

#[test]
fn timeout_kills_the_whole_tree() {
    let marker = "999.4321";
    let spec = CommandSpec {
        binary: "/bin/sh".into(),
        args: vec![
            "-c".into(),
            format!("/bin/sleep {marker} & /bin/sleep {marker}; wait"),
        ],
        stdin: None,
        timeout: Duration::from_secs(1),
    };
    let err = run_command(&spec, &policy(&["/bin/sh"]), Path::new("/tmp")).unwrap_err();
    assert!(matches!(err, CommandError::Timeout { .. }));
    std::thread::sleep(Duration::from_millis(200));
    assert!(processes_with_arg(marker).is_empty());
}

// ---- triage ----

fn symbol_listing_imports(bin: &Path, sym: &str) -> bool {
    let out = Command::new("nm")
        .args(["-D", "--undefined-only"])
        .arg(bin)
        .output()
        .unwrap();
    String::from_utf8_lossy(&out.stdout).lines().any(|l| {
        l.split_whitespace()
            .last()
            .is_some_and(|n| n.split('@').next() == Some(sym))
    })
}

#[test]
fn gets_import_is_memory_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let bin = compile("uses_gets.c", dir.path(), &[]);
    assert!(symbol_listing_imports(&bin, "gets"));
    let r = triage_classify(bin.file_name().unwrap().to_str().unwrap(), dir.path()).unwrap();
    assert_eq!(r.predicted_category, Category::MemoryCorruption);
    assert!(r.evidence.iter().any(|e| e == "dangerous-import"));
    let again = triage_classify(bin.file_name().unwrap().to_str().unwrap(), dir.path()).unwrap();
    assert_eq!(again, r);
}

#[test]
fn url_is_web_and_blank_is_unknown() {
    let r = triage_classify("http://10.0.0.5:8080/login", Path::new("/")).unwrap();
    assert_eq!(r.predicted_category, Category::WebExploitation);

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("notes.txt"), "a b c\n").unwrap();
    let r = triage_classify("notes.txt", dir.path()).unwrap();
    assert_eq!(r.predicted_category, Category::Unknown);
    assert_eq!(r.confidence, 0.0);
    assert!(r.evidence.is_empty());
}

#[test]
fn missing_artifact_is_unreadable() {
    assert!(triage_classify("no/such/file", Path::new("/tmp")).is_err());
}
