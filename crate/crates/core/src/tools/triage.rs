//! Challenge triage: ordered heuristic table over a static pass and one
//! sandboxed run.
//!
//! | # | heuristic            | category            | confidence |
//! |---|----------------------|---------------------|------------|
//! | 1 | url-http-scheme      | Web Exploitation    | 0.9        |
//! | 2 | dangerous-import     | Memory Corruption   | 0.8        |
//! | 3 | crash-on-long-input  | Memory Corruption   | 0.7        |
//! | 4 | crypto-primitive     | Cryptography        | 0.6        |
//! | 5 | hex-ciphertext       | Cryptography        | 0.6        |
//! | 6 | timing-primitive     | Cryptography        | 0.5        |
//! | 7 | web-source           | Web Exploitation    | 0.6        |
//! | 8 | comparison-routine   | Reverse Engineering | 0.5        |
//! | 9 | elf-binary           | Reverse Engineering | 0.4        |
//!
//! The first heuristic that fires picks the category; every fired heuristic
//! is listed as evidence.

use std::os::unix::process::ExitStatusExt;
use std::path::Path;
use std::process::Command;
use std::time::Duration;

use object::{Object, ObjectSymbol};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::command::supervise;

/// Below this confidence the category is reported as Unknown.
pub const UNKNOWN_THRESHOLD: f64 = 0.3;
const DYNAMIC_TIMEOUT: Duration = Duration::from_secs(3);
const LONG_INPUT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "Memory Corruption")]
    MemoryCorruption,
    #[serde(rename = "Reverse Engineering")]
    ReverseEngineering,
    #[serde(rename = "Web Exploitation")]
    WebExploitation,
    #[serde(rename = "Cryptography")]
    Cryptography,
    #[serde(rename = "Unknown")]
    Unknown,
}

impl Category {
    pub const KNOWN: [Category; 4] = [
        Category::MemoryCorruption,
        Category::ReverseEngineering,
        Category::WebExploitation,
        Category::Cryptography,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::MemoryCorruption => "Memory Corruption",
            Category::ReverseEngineering => "Reverse Engineering",
            Category::WebExploitation => "Web Exploitation",
            Category::Cryptography => "Cryptography",
            Category::Unknown => "Unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::KNOWN.as_slice(), &[Category::Unknown]]
            .concat()
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageReport {
    pub predicted_category: Category,
    pub confidence: f64,
    pub evidence: Vec<String>,
}

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("cannot read artifact '{path}': {reason}")]
    UnreadableArtifact { path: String, reason: String },
}

/// Facts gathered about an artifact before the table is applied.
#[derive(Debug, Default, Clone)]
pub struct Facts {
    pub is_url: bool,
    pub is_elf: bool,
    pub imports: Vec<String>,
    pub strings: Vec<String>,
    pub text: Option<String>,
    pub crashed_on_long_input: bool,
}

struct Heuristic {
    name: &'static str,
    category: Category,
    confidence: f64,
    fires: fn(&Facts) -> bool,
}

const DANGEROUS: &[&str] = &[
    "gets", "strcpy", "strcat", "sprintf", "vsprintf", "stpcpy", "scanf",
];
const CRYPTO_IMPORTS: &[&str] = &[
    "AES_",
    "EVP_",
    "MD5",
    "SHA1",
    "SHA256",
    "RC4",
    "crypt",
    "RAND_bytes",
    "BN_",
];
const CRYPTO_WORDS: &[&str] = &["ciphertext", "AES", "RSA", "xor key", "modulus", "nonce"];
const SLEEPS: &[&str] = &["usleep", "nanosleep", "sleep", "clock_nanosleep"];
const COMPARES: &[&str] = &["strcmp", "strncmp", "memcmp"];
const WEB_MARKERS: &[&str] = &[
    "<html",
    "<?php",
    "<script",
    "document.cookie",
    "$_GET",
    "$_POST",
    "app.route(",
];

fn imports_any(f: &Facts, names: &[&str]) -> bool {
    f.imports.iter().any(|i| names.iter().any(|n| i == n))
}

fn imports_prefix(f: &Facts, prefixes: &[&str]) -> bool {
    f.imports
        .iter()
        .any(|i| prefixes.iter().any(|p| i.starts_with(p)))
}

const TABLE: &[Heuristic] = &[
    Heuristic {
        name: "url-http-scheme",
        category: Category::WebExploitation,
        confidence: 0.9,
        fires: |f| f.is_url,
    },
    Heuristic {
        name: "dangerous-import",
        category: Category::MemoryCorruption,
        confidence: 0.8,
        fires: |f| imports_any(f, DANGEROUS),
    },
    Heuristic {
        name: "crash-on-long-input",
        category: Category::MemoryCorruption,
        confidence: 0.7,
        fires: |f| f.crashed_on_long_input,
    },
    Heuristic {
        name: "crypto-primitive",
        category: Category::Cryptography,
        confidence: 0.6,
        fires: |f| {
            imports_prefix(f, CRYPTO_IMPORTS)
                || f.strings
                    .iter()
                    .any(|s| CRYPTO_WORDS.iter().any(|w| s.contains(w)))
        },
    },
    Heuristic {
        name: "hex-ciphertext",
        category: Category::Cryptography,
        confidence: 0.6,
        fires: |f| f.text.as_deref().is_some_and(looks_like_ciphertext),
    },
    Heuristic {
        name: "timing-primitive",
        category: Category::Cryptography,
        confidence: 0.5,
        fires: |f| f.is_elf && imports_any(f, SLEEPS),
    },
    Heuristic {
        name: "web-source",
        category: Category::WebExploitation,
        confidence: 0.6,
        fires: |f| {
            f.text
                .as_deref()
                .is_some_and(|t| WEB_MARKERS.iter().any(|m| t.contains(m)))
        },
    },
    Heuristic {
        name: "comparison-routine",
        category: Category::ReverseEngineering,
        confidence: 0.5,
        fires: |f| imports_any(f, COMPARES),
    },
    Heuristic {
        name: "elf-binary",
        category: Category::ReverseEngineering,
        confidence: 0.4,
        fires: |f| f.is_elf,
    },
];

/// A text body made of hex or base64 tokens, at least 16 characters long.
fn looks_like_ciphertext(text: &str) -> bool {
    let body: String = text.split_whitespace().collect();
    if body.len() < 16 {
        return false;
    }
    let hex = body.len().is_multiple_of(2) && body.bytes().all(|b| b.is_ascii_hexdigit());
    let b64 = body.len().is_multiple_of(4)
        && body
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'+' || b == b'/' || b == b'=')
        && body.bytes().any(|b| b.is_ascii_digit())
        && body.bytes().any(|b| b.is_ascii_uppercase());
    hex || b64
}

/// Applies the ordered table to `facts`.
pub fn classify(facts: &Facts) -> TriageReport {
    let fired: Vec<&Heuristic> = TABLE.iter().filter(|h| (h.fires)(facts)).collect();
    let evidence = fired.iter().map(|h| h.name.to_string()).collect();
    match fired.first() {
        Some(h) if h.confidence >= UNKNOWN_THRESHOLD => TriageReport {
            predicted_category: h.category,
            confidence: h.confidence,
            evidence,
        },
        Some(h) => TriageReport {
            predicted_category: Category::Unknown,
            confidence: h.confidence,
            evidence,
        },
        None => TriageReport {
            predicted_category: Category::Unknown,
            confidence: 0.0,
            evidence,
        },
    }
}

/// Full triage of a filesystem path (relative to `workdir`) or http(s) URL.
pub fn triage_classify(artifact: &str, workdir: &Path) -> Result<TriageReport, TriageError> {
    if let Some(rest) = artifact
        .strip_prefix("http://")
        .or_else(|| artifact.strip_prefix("https://"))
    {
        let host = rest.split(['/', '?', '#']).next().unwrap_or("");
        if host.is_empty() || host.contains(char::is_whitespace) {
            return Err(TriageError::UnreadableArtifact {
                path: artifact.to_string(),
                reason: "URL has no host".into(),
            });
        }
        return Ok(classify(&Facts {
            is_url: true,
            ..Facts::default()
        }));
    }
    let path = workdir.join(artifact);
    let bytes = std::fs::read(&path).map_err(|e| TriageError::UnreadableArtifact {
        path: artifact.to_string(),
        reason: e.to_string(),
    })?;
    let mut facts = static_facts(&bytes);
    if facts.is_elf && is_executable(&path) {
        facts.crashed_on_long_input = crashes_on_long_input(&path, workdir);
    }
    Ok(classify(&facts))
}

/// Static pass: file magic, undefined dynamic symbols, printable strings.
pub fn static_facts(bytes: &[u8]) -> Facts {
    let mut facts = Facts {
        is_elf: bytes.starts_with(b"\x7fELF"),
        strings: printable_strings(bytes, 4),
        ..Facts::default()
    };
    if facts.is_elf {
        if let Ok(file) = object::File::parse(bytes) {
            let mut imports: Vec<String> = file
                .dynamic_symbols()
                .filter(|s| s.is_undefined())
                .filter_map(|s| s.name().ok())
                .map(|n| n.split('@').next().unwrap_or(n).to_string())
                .filter(|n| !n.is_empty())
                .collect();
            imports.sort();
            imports.dedup();
            facts.imports = imports;
        }
    } else if let Ok(text) = std::str::from_utf8(bytes) {
        facts.text = Some(text.to_string());
    }
    facts
}

fn printable_strings(bytes: &[u8], min: usize) -> Vec<String> {
    bytes
        .split(|b| !(0x20..0x7f).contains(b))
        .filter(|run| run.len() >= min)
        .map(|run| String::from_utf8_lossy(run).into_owned())
        .collect()
}

fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    std::fs::metadata(path).is_ok_and(|m| m.permissions().mode() & 0o111 != 0)
}

/// The dynamic half: one run fed a long line, watching for a fatal signal.
fn crashes_on_long_input(path: &Path, workdir: &Path) -> bool {
    let mut input = vec![b'A'; LONG_INPUT];
    input.push(b'\n');
    let mut cmd = Command::new(path);
    cmd.current_dir(workdir).env_clear();
    match supervise(cmd, Some(&input), DYNAMIC_TIMEOUT, 64 * 1024) {
        Ok(out) if !out.timed_out => matches!(
            out.status.signal(),
            Some(libc::SIGSEGV | libc::SIGBUS | libc::SIGABRT | libc::SIGILL)
        ),
        _ => false,
    }
}
