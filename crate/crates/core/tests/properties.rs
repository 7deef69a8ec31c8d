use std::collections::BTreeSet;
use std::io::Cursor;

use ctfgate_core::gateway::{enforce_scope, ScopePolicy};
use ctfgate_core::protocol::wire::{read_frame, write_frame};
use ctfgate_core::protocol::{
    decode_message, encode_message, project_distribution, validate_call, ActionDistribution,
    Framing, MessageId, ProjectionError, ToolCall, WeightedCall, WireMessage,
};
use ctfgate_core::tools::catalog;
use proptest::prelude::*;
use serde_json::{json, Map, Value};

fn json_leaf() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(|n| json!(n)),
        any::<u64>().prop_map(|n| json!(n)),
        (-1e300f64..1e300).prop_map(|f| json!(f)),
        ".{0,40}".prop_map(Value::String),
    ]
}

fn json_value() -> impl Strategy<Value = Value> {
    json_leaf().prop_recursive(4, 64, 8, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 0..8).prop_map(Value::Array),
            proptest::collection::btree_map("[a-z_]{1,8}", inner, 0..8)
                .prop_map(|m| Value::Object(m.into_iter().collect::<Map<_, _>>())),
        ]
    })
}

fn message() -> impl Strategy<Value = WireMessage> {
    let payload = json_value();
    (
        0u8..4,
        any::<u64>(),
        "[a-z/]{1,16}",
        payload,
        "[A-Za-z0-9-]{1,12}",
    )
        .prop_map(|(k, id, method, payload, sid)| match k {
            0 => WireMessage::request(id, &method, payload),
            1 => WireMessage::response(MessageId::Str(sid), &method, payload),
            2 => WireMessage::error_response(Some(MessageId::Num(id)), &sid, &method),
            _ => WireMessage::notification(&method, payload),
        })
}

proptest! {
    #[test]
    fn wire_round_trip(m in message()) {
        prop_assert_eq!(decode_message(&encode_message(&m)).unwrap(), m.clone());
        for framing in [Framing::Lines, Framing::LengthPrefixed] {
            let mut buf = Vec::new();
            write_frame(&mut buf, framing, &m).unwrap();
            let back = read_frame(&mut Cursor::new(buf), framing).unwrap().unwrap();
            prop_assert_eq!(&back, &m);
        }
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_message(&bytes);
    }

    #[test]
    fn encoded_frames_have_no_raw_newline(m in message()) {
        let bytes = encode_message(&m);
        prop_assert!(!bytes.contains(&b'\n'));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn one_mebibyte_payload_round_trips(seed in any::<u64>(), text in "[ -~\n\t\u{e9}\u{4e2d}]{64}") {
        let mut chunks = Vec::new();
        let mut size = 0usize;
        let mut i = seed;
        while size < 1 << 20 {
            i = i.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let s = format!("{text}{i:x}");
            size += s.len();
            chunks.push(Value::String(s));
        }
        let m = WireMessage::request(seed, "tools/result", json!({"chunks": chunks}));
        let bytes = encode_message(&m);
        prop_assert!(bytes.len() >= 1 << 20);
        prop_assert_eq!(decode_message(&bytes).unwrap(), m);
    }
}

// Independent per-constraint evaluator for the port_scan schema: port an
// integer in 1..=65535, target a dotted quad, protocol tcp or udp, nothing else.

fn oracle_port(v: &Value) -> bool {
    match v {
        Value::Number(n) => n.as_u64().is_some_and(|p| (1..=65535).contains(&p)),
        _ => false,
    }
}

fn oracle_ipv4(v: &Value) -> bool {
    let Some(s) = v.as_str() else { return false };
    let parts: Vec<&str> = s.split('.').collect();
    parts.len() == 4
        && parts.iter().all(|p| {
            !p.is_empty()
                && p.len() <= 3
                && p.bytes().all(|b| b.is_ascii_digit())
                && (p.len() == 1 || !p.starts_with('0'))
                && p.parse::<u16>().is_ok_and(|n| n <= 255)
        })
}

fn oracle_protocol(v: &Value) -> bool {
    matches!(v.as_str(), Some("tcp") | Some("udp"))
}

/// Number of independently failing constraints.
fn oracle_breaches(args: &Map<String, Value>) -> usize {
    let mut n = 0;
    match args.get("target") {
        None | Some(Value::Null) => n += 1,
        Some(v) if !oracle_ipv4(v) => n += 1,
        _ => {}
    }
    match args.get("port") {
        None | Some(Value::Null) => n += 1,
        Some(v) if !oracle_port(v) => n += 1,
        _ => {}
    }
    if let Some(v) = args.get("protocol") {
        if !v.is_null() && !oracle_protocol(v) {
            n += 1;
        }
    }
    n + args
        .keys()
        .filter(|k| !["target", "port", "protocol"].contains(&k.as_str()))
        .count()
}

fn scan_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        (0u64..70000).prop_map(|n| json!(n)),
        (-5i64..0).prop_map(|n| json!(n)),
        (0.0f64..100.0).prop_map(|f| json!(f)),
        (0u8..=255, 0u8..=255, 0u16..300, 0u8..=255)
            .prop_map(|(a, b, c, d)| json!(format!("{a}.{b}.{c}.{d}"))),
        Just(json!("010.0.0.1")),
        Just(json!("10.0.0")),
        Just(json!("tcp")),
        Just(json!("udp")),
        Just(json!("sctp")),
        Just(json!("80")),
        Just(json!(true)),
        Just(json!([80])),
        Just(Value::Null),
    ]
}

fn scan_args() -> impl Strategy<Value = Map<String, Value>> {
    proptest::collection::btree_map(
        prop_oneof![
            Just("target".to_string()),
            Just("port".to_string()),
            Just("protocol".to_string()),
            "[a-z]{1,6}"
        ],
        scan_value(),
        0..5,
    )
    .prop_map(|m| m.into_iter().collect())
}

proptest! {
    #[test]
    fn verdicts_agree_with_independent_evaluator(args in scan_args()) {
        let schema = catalog::port_scan();
        let v = validate_call(&ToolCall::new("c", "port_scan", Value::Object(args.clone())), &schema);
        let breaches = oracle_breaches(&args);
        prop_assert_eq!(v.valid, breaches == 0);
        prop_assert_eq!(v.valid, v.violations.is_empty());
        prop_assert_eq!(v.violations.len(), breaches);
        for viol in &v.violations {
            match &viol.param {
                Some(p) => prop_assert!(schema.param(p).is_some()),
                None => prop_assert!(viol.constraint.contains("unknown parameter")),
            }
        }
    }

    #[test]
    fn k_injected_breaches_give_k_violations(mask in 0u8..16) {
        // Start valid, then break a chosen subset of independent constraints.
        let mut args = Map::new();
        args.insert("target".into(), json!("10.0.0.5"));
        args.insert("port".into(), json!(80));
        args.insert("protocol".into(), json!("tcp"));
        let mut k = 0;
        if mask & 1 != 0 { args.insert("target".into(), json!("10.0.0.500")); k += 1; }
        if mask & 2 != 0 { args.insert("port".into(), json!(70000)); k += 1; }
        if mask & 4 != 0 { args.insert("protocol".into(), json!("icmp")); k += 1; }
        if mask & 8 != 0 { args.insert("rate".into(), json!(9)); k += 1; }
        let v = validate_call(&ToolCall::new("c", "port_scan", Value::Object(args)), &catalog::port_scan());
        prop_assert_eq!(v.violations.len(), k);
    }
}

fn candidates() -> impl Strategy<Value = Vec<(bool, f64)>> {
    proptest::collection::vec((any::<bool>(), prop_oneof![Just(0.0), 0.0f64..10.0]), 1..12)
}

fn distribution(c: &[(bool, f64)]) -> ActionDistribution {
    let entries = c
        .iter()
        .enumerate()
        .map(|(i, &(valid, w))| {
            let port = if valid { 80 } else { 70000 };
            WeightedCall {
                call: ToolCall::new(
                    format!("c{i:02}"),
                    "port_scan",
                    json!({"target": "10.0.0.5", "port": port}),
                ),
                weight: w,
            }
        })
        .collect();
    ActionDistribution::from_candidates(entries)
}

proptest! {
    #[test]
    fn projection_properties(c in candidates()) {
        prop_assume!(c.iter().any(|&(_, w)| w > 0.0));
        let schema = catalog::port_scan();
        let d = distribution(&c);
        let z: f64 = c.iter().filter(|&&(ok, _)| ok).map(|&(_, w)| w).sum();
        match project_distribution(&d, |n| (n == "port_scan").then_some(&schema)) {
            Err(e) => {
                prop_assert_eq!(e, ProjectionError::EmptyValidSet);
                prop_assert!(z == 0.0);
            }
            Ok(p) => {
                let sum: f64 = p.entries.iter().map(|e| e.weight).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-9);
                prop_assert!((p.normalizer - z).abs() <= 1e-9 * z.max(1.0));
                let valid_ids: BTreeSet<String> = c
                    .iter()
                    .enumerate()
                    .filter(|(_, &(ok, _))| ok)
                    .map(|(i, _)| format!("c{i:02}"))
                    .collect();
                let kept: BTreeSet<String> = p.entries.iter().map(|e| e.call.call_id.0.clone()).collect();
                prop_assert_eq!(&kept, &valid_ids);
                for e in &p.entries {
                    let i: usize = e.call.call_id.0[1..].parse().unwrap();
                    prop_assert!((e.weight - c[i].1 / z).abs() <= 1e-12);
                }
                // Argmax over the valid set is unchanged by projection.
                let before = d
                    .ranked()
                    .into_iter()
                    .find(|e| valid_ids.contains(&e.call.call_id.0))
                    .map(|e| e.call.call_id.clone());
                prop_assert_eq!(p.argmax().map(|e| e.call.call_id.clone()), before);
                // Projecting twice changes nothing.
                let again = project_distribution(&p, |n| (n == "port_scan").then_some(&schema)).unwrap();
                for (a, b) in again.entries.iter().zip(&p.entries) {
                    prop_assert!((a.weight - b.weight).abs() <= 1e-12);
                }
            }
        }
    }
}

fn policy(cidrs: &[&str], bins: &[&str]) -> ScopePolicy {
    serde_json::from_value(json!({"allowed_cidrs": cidrs, "allowed_binaries": bins})).unwrap()
}

const CIDRS: [&str; 4] = [
    "10.0.0.0/24",
    "10.0.1.0/24",
    "192.168.0.0/16",
    "127.0.0.1/32",
];
const BINS: [&str; 4] = [
    "/bin/echo",
    "/usr/bin/strings",
    "/usr/bin/python3",
    "/bin/sleep",
];

proptest! {
    #[test]
    fn shrinking_scope_never_validates_more(
        keep_c in proptest::collection::vec(any::<bool>(), 4),
        shrink_c in proptest::collection::vec(any::<bool>(), 4),
        keep_b in proptest::collection::vec(any::<bool>(), 4),
        shrink_b in proptest::collection::vec(any::<bool>(), 4),
        ip in (0u8..3, 0u8..=255).prop_map(|(net, host)| match net {
            0 => format!("10.0.{}.{host}", host % 3),
            1 => format!("192.168.{host}.1"),
            _ => format!("127.0.0.{}", host % 3),
        }),
        bin in proptest::sample::select(vec!["/bin/echo", "/usr/bin/strings", "/usr/bin/python3", "/bin/sleep", "/bin/rm", "/bin/../bin/echo"]),
    ) {
        let pick = |names: &[&'static str], keep: &[bool]| -> Vec<&'static str> {
            names.iter().zip(keep).filter(|(_, &k)| k).map(|(n, _)| *n).collect()
        };
        let big_c = pick(&CIDRS, &keep_c);
        let big_b = pick(&BINS, &keep_b);
        let small_c: Vec<&str> = big_c.iter().zip(&shrink_c).filter(|(_, &k)| k).map(|(n, _)| *n).collect();
        let small_b: Vec<&str> = big_b.iter().zip(&shrink_b).filter(|(_, &k)| k).map(|(n, _)| *n).collect();
        let big = policy(&big_c, &big_b);
        let small = policy(&small_c, &small_b);
        let scan = ToolCall::new("c", "port_scan", json!({"target": ip, "port": 80}));
        let run = ToolCall::new("c", "run_command", json!({"binary": bin}));
        for (call, schema) in [(&scan, catalog::port_scan()), (&run, catalog::run_command())] {
            let b = enforce_scope(call, &schema, &big);
            let s = enforce_scope(call, &schema, &small);
            prop_assert!(!(s.valid && !b.valid));
            prop_assert!(s.violations.len() >= b.violations.len());
        }
    }
}
