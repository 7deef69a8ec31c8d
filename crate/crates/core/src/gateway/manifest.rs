//! Tool-server manifest: which servers to launch and how.
//!
//! ```toml
//! [[server]]
//! name = "commands"
//! command = ["/usr/local/bin/ctfgate", "serve", "commands"]
//! tools = ["run_command"]
//! ```

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use super::client::EndpointDescriptor;
use crate::tools::catalog::ServerKind;

/// Conventional launcher for the external symbolic-execution server.
pub const SYMEXEC_COMMAND: [&str; 2] = ["symexec-server", "--stdio"];

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read tools manifest {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("invalid tools manifest: {0}")]
    Invalid(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default)]
    server: Vec<EndpointDescriptor>,
}

pub fn parse_manifest(text: &str) -> Result<Vec<EndpointDescriptor>, ManifestError> {
    let f: ManifestFile =
        toml::from_str(text).map_err(|e| ManifestError::Invalid(e.to_string()))?;
    for s in &f.server {
        if s.command.is_empty() {
            return Err(ManifestError::Invalid(format!(
                "server '{}' has an empty command",
                s.server
            )));
        }
    }
    Ok(f.server)
}

pub fn load_manifest(path: &Path) -> Result<Vec<EndpointDescriptor>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Unreadable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_manifest(&text)
}

/// The five standard servers. Native ones run as `launcher… <kind>`.
pub fn default_servers(launcher: &[String]) -> Vec<EndpointDescriptor> {
    ServerKind::ALL
        .into_iter()
        .map(|kind| {
            let command = match kind {
                ServerKind::Symexec => SYMEXEC_COMMAND.iter().map(|s| s.to_string()).collect(),
                _ => launcher
                    .iter()
                    .cloned()
                    .chain([kind.as_str().to_string()])
                    .collect(),
            };
            EndpointDescriptor {
                server: kind.as_str().to_string(),
                command,
                env: Default::default(),
                tools: kind
                    .tools()
                    .iter()
                    .map(|t| t.tool_name().to_string())
                    .collect(),
            }
        })
        .collect()
}
