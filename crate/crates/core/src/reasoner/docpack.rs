//! Documentation bundles for the four guidance conditions.
//!
//! A pack root holds one directory per condition; every regular file in a
//! condition directory is a document, loaded in name order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::schema::ToolSchema;
use crate::tools::catalog::{render_schema_sheet, ServerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Baseline,
    Templates,
    Lessons,
    Minimal,
}

impl Condition {
    /// Richest first; the required line-count order.
    pub const ALL: [Condition; 4] = [
        Condition::Baseline,
        Condition::Templates,
        Condition::Lessons,
        Condition::Minimal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::Templates => "templates",
            Condition::Lessons => "lessons",
            Condition::Minimal => "minimal",
        }
    }

    /// Capitalized name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Condition::Baseline => "Baseline",
            Condition::Templates => "Templates",
            Condition::Lessons => "Lessons",
            Condition::Minimal => "Minimal",
        }
    }

    /// Whether the triage tool is offered under this condition.
    pub fn has_triage(self) -> bool {
        self != Condition::Minimal
    }

    /// Tool schemas offered under this condition.
    pub fn tools(self) -> Vec<ToolSchema> {
        crate::tools::catalog()
            .into_iter()
            .filter(|s| self.has_triage() || s.tool_name() != "triage")
            .collect()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                format!(
                    "unknown condition '{s}' (expected baseline, templates, lessons or minimal)"
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocPack {
    pub condition: Condition,
    pub documents: Vec<(String, String)>,
    pub total_lines: usize,
}

/// What a reasoner request carries instead of the full text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocPackRef {
    pub condition: Condition,
    pub total_lines: usize,
}

#[derive(Debug, Error)]
pub enum DocPackError {
    #[error("no '{condition}' pack under {}", root.display())]
    MissingCondition { condition: Condition, root: PathBuf },
    #[error("pack sizes out of order: {0}")]
    OrderingViolation(String),
    #[error("cannot read {}: {message}", path.display())]
    Unreadable { path: PathBuf, message: String },
}

impl DocPack {
    pub fn reference(&self) -> DocPackRef {
        DocPackRef {
            condition: self.condition,
            total_lines: self.total_lines,
        }
    }

    /// All documents, each under a `==> name <==` header line.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (name, body) in &self.documents {
            out.push_str(&format!("==> {name} <==\n{body}"));
            if !body.ends_with('\n') {
                out.push('\n');
            }
        }
        out
    }

    pub fn document(&self, name: &str) -> Option<&str> {
        self.documents
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_str())
    }
}

fn line_count(text: &str) -> usize {
    text.lines().count()
}

fn load_dir(condition: Condition, root: &Path) -> Result<DocPack, DocPackError> {
    let dir = root.join(condition.as_str());
    if !dir.is_dir() {
        return Err(DocPackError::MissingCondition {
            condition,
            root: root.to_path_buf(),
        });
    }
    let unreadable = |path: &Path, e: std::io::Error| DocPackError::Unreadable {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| unreadable(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut documents = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| unreadable(&p, e))?;
        let name = p
            .file_name()
            .expect("read_dir entries have names")
            .to_string_lossy()
            .into_owned();
        documents.push((name, text));
    }
    let total_lines = documents.iter().map(|(_, t)| line_count(t)).sum();
    Ok(DocPack {
        condition,
        documents,
        total_lines,
    })
}

/// Loads every condition's pack and checks the strict size ordering.
pub fn load_all(root: &Path) -> Result<Vec<DocPack>, DocPackError> {
    let packs = Condition::ALL
        .into_iter()
        .map(|c| load_dir(c, root))
        .collect::<Result<Vec<_>, _>>()?;
    for pair in packs.windows(2) {
        if pair[0].total_lines <= pair[1].total_lines {
            return Err(DocPackError::OrderingViolation(format!(
                "{} has {} lines, {} has {}",
                pair[0].condition, pair[0].total_lines, pair[1].condition, pair[1].total_lines
            )));
        }
    }
    Ok(packs)
}

/// Loads one condition's pack after checking the whole set under `root`.
pub fn load_doc_pack(condition: Condition, root: &Path) -> Result<DocPack, DocPackError> {
    let packs = load_all(root)?;
    Ok(packs
        .into_iter()
        .find(|p| p.condition == condition)
        .expect("load_all covers every condition"))
}

/// The Minimal pack: server definitions and the schema sheet, nothing else.
pub fn render_minimal_pack() -> String {
    let tools = Condition::Minimal.tools();
    let mut out = String::from("# Servers\n");
    for kind in ServerKind::ALL {
        let names: Vec<&str> = tools
            .iter()
            .map(|s| s.tool_name())
            .filter(|n| kind.tools().iter().any(|t| t.tool_name() == *n))
            .collect();
        let launch = match kind {
            ServerKind::Symexec => crate::gateway::manifest::SYMEXEC_COMMAND.join(" "),
            k => format!("ctfgate-tool {k}"),
        };
        out.push_str(&format!(
            "- {kind}: `{launch}` serves {}\n",
            names.join(", ")
        ));
    }
    out.push_str("\n# Protocol\n");
    out.push_str("- tools/list returns every registered schema with its server and health.\n");
    out.push_str("- tools/call carries {call_id, tool_name, arguments}; the reply is tools/result or tools/reject.\n");
    out.push_str(
        "- Rejected calls are never executed; a rejection lists every violation and a hint.\n\n",
    );
    out.push_str(&render_schema_sheet(&tools));
    out
}
