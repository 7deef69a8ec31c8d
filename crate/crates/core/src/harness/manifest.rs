//! Challenge manifests: `challenge.toml` in each challenge directory.
//!
//! `{sandbox}` in policy entries and in the solve script is replaced with
//! the trial's sandbox path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{FlagPattern, DEFAULT_FLAG_PATTERN};
use crate::gateway::{PolicyError, ScopePolicy, DEFAULT_MAX_WALL_TIME};
use crate::tools::triage::Category;

pub const MANIFEST_FILE: &str = "challenge.toml";
pub const SANDBOX_PLACEHOLDER: &str = "{sandbox}";

fn default_flag_pattern() -> String {
    DEFAULT_FLAG_PATTERN.to_string()
}

fn default_objective() -> String {
    "Find the flag".to_string()
}

/// A background process the challenge needs, started after setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub command: Vec<String>,
    /// Sandbox-relative path that appears once the service is up.
    pub ready_path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default)]
    pub allowed_cidrs: Vec<String>,
    #[serde(default)]
    pub allowed_binaries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wall_time_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengeManifest {
    pub id: String,
    pub category: Category,
    /// Sandbox-relative file, or `unix:<socket>` / `host:port` for services.
    pub artifact: String,
    #[serde(default = "default_flag_pattern")]
    pub flag_pattern: String,
    pub points: u32,
    #[serde(default = "default_objective")]
    pub objective: String,
    /// Files copied from the challenge directory into the sandbox.
    #[serde(default)]
    pub files: Vec<String>,
    #[serde(default)]
    pub setup: Vec<Vec<String>>,
    #[serde(default)]
    pub teardown: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<ServiceSpec>,
    #[serde(default)]
    pub policy: PolicySpec,
    /// Solve script for the scripted reasoner, relative to the directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    /// Free text; carries no semantics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    #[serde(skip)]
    pub dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {}: {message}", path.display())]
    Unreadable { path: PathBuf, message: String },
    #[error("invalid manifest {}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
}

impl ChallengeManifest {
    pub fn parse(text: &str, dir: &Path) -> Result<Self, ManifestError> {
        let invalid = |message: String| ManifestError::Invalid {
            path: dir.join(MANIFEST_FILE),
            message,
        };
        let mut m: ChallengeManifest = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        m.dir = dir.to_path_buf();
        if m.id.is_empty()
            || !m
                .id
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
        {
            return Err(invalid(format!(
                "id '{}' must be lowercase letters, digits and dashes",
                m.id
            )));
        }
        if m.category == Category::Unknown {
            return Err(invalid(
                "category must be one of the four benchmark categories".into(),
            ));
        }
        FlagPattern::new(&m.flag_pattern).map_err(|e| invalid(format!("flag_pattern: {e}")))?;
        if m.setup.iter().chain(&m.teardown).any(Vec::is_empty) {
            return Err(invalid(
                "setup and teardown commands must be nonempty".into(),
            ));
        }
        if m.service.as_ref().is_some_and(|s| s.command.is_empty()) {
            return Err(invalid("service command is empty".into()));
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| ManifestError::Unreadable {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Self::parse(&text, dir)
    }

    pub fn flag(&self) -> FlagPattern {
        FlagPattern::new(&self.flag_pattern).expect("checked at parse time")
    }

    /// The scope policy with `{sandbox}` filled in.
    pub fn scope_policy(&self, sandbox: &Path) -> Result<ScopePolicy, PolicyError> {
        let fill = |s: &String| s.replace(SANDBOX_PLACEHOLDER, &sandbox.to_string_lossy());
        let doc = json!({
            "allowed_cidrs": self.policy.allowed_cidrs,
            "allowed_binaries": self.policy.allowed_binaries.iter().map(fill).collect::<Vec<_>>(),
            "max_wall_time_seconds": self.policy.max_wall_time_seconds.unwrap_or(DEFAULT_MAX_WALL_TIME.as_secs()),
        });
        serde_json::from_value(doc).map_err(|e| PolicyError::Invalid(e.to_string()))
    }
}

/// Every challenge directory under `root`, ordered by id.
pub fn load_suite(root: &Path) -> Result<Vec<ChallengeManifest>, ManifestError> {
    let entries = std::fs::read_dir(root).map_err(|e| ManifestError::Unreadable {
        path: root.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for e in entries.flatten() {
        if e.path().join(MANIFEST_FILE).is_file() {
            out.push(ChallengeManifest::load(&e.path())?);
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        id = "demo"
        category = "Cryptography"
        artifact = "cipher.hex"
        points = 50
    "#;

    #[test]
    fn defaults() {
        let m = ChallengeManifest::parse(MINIMAL, Path::new("/x")).unwrap();
        assert_eq!(m.flag_pattern, DEFAULT_FLAG_PATTERN);
        assert_eq!(m.objective, "Find the flag");
        assert!(m.flag().is_full_match("flag{abc}"));
    }

    #[test]
    fn rejects_bad_pattern_and_category() {
        let bad = format!("{MINIMAL}\nflag_pattern = \"flag{{(\"");
        assert!(ChallengeManifest::parse(&bad, Path::new("/x")).is_err());
        let unknown = MINIMAL.replace("Cryptography", "Unknown");
        assert!(ChallengeManifest::parse(&unknown, Path::new("/x")).is_err());
        let typo = format!("{MINIMAL}\nsetpu = []");
        assert!(ChallengeManifest::parse(&typo, Path::new("/x")).is_err());
    }

    #[test]
    fn sandbox_placeholder_in_policy() {
        let text = format!(
            "{MINIMAL}\n[policy]\nallowed_binaries = [\"{{sandbox}}/vuln\", \"/usr/bin/strings\"]"
        );
        let m = ChallengeManifest::parse(&text, Path::new("/x")).unwrap();
        let p = m.scope_policy(Path::new("/tmp/sb")).unwrap();
        assert!(p.allows_binary("/tmp/sb/vuln"));
        assert!(p.allows_binary("/usr/bin/strings"));
    }
}
