//! Tool schemas, grouped by the server that implements them.

use std::fmt;
use std::str::FromStr;

use crate::protocol::schema::{ParamKind, ParamSpec, ToolSchema};

const ABSOLUTE_PATH: &str = "/[^\\x00]*";
const NO_NUL: &str = "[^\\x00]*";
const IDENTIFIER: &str = "[A-Za-z_][A-Za-z0-9_.$@]*";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ServerKind {
    Commands,
    Secops,
    Debug,
    Decompiler,
    Symexec,
}

impl ServerKind {
    pub const ALL: [ServerKind; 5] = [
        ServerKind::Commands,
        ServerKind::Secops,
        ServerKind::Debug,
        ServerKind::Decompiler,
        ServerKind::Symexec,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ServerKind::Commands => "commands",
            ServerKind::Secops => "secops",
            ServerKind::Debug => "debug",
            ServerKind::Decompiler => "decompiler",
            ServerKind::Symexec => "symexec",
        }
    }

    pub fn tools(self) -> Vec<ToolSchema> {
        match self {
            ServerKind::Commands => vec![run_command()],
            ServerKind::Secops => vec![port_scan(), parse_scan_report(), triage()],
            ServerKind::Debug => vec![debug_start(), inspect_heap(), debug_stop()],
            ServerKind::Decompiler => vec![get_xrefs()],
            ServerKind::Symexec => vec![solve_path(), solve_by_output()],
        }
    }
}

impl fmt::Display for ServerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ServerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown server kind '{s}'"))
    }
}

/// Every schema, in server order.
pub fn catalog() -> Vec<ToolSchema> {
    ServerKind::ALL.iter().flat_map(|k| k.tools()).collect()
}

pub fn schema(tool_name: &str) -> Option<ToolSchema> {
    catalog().into_iter().find(|s| s.tool_name() == tool_name)
}

fn build(name: &str, description: &str, params: Vec<ParamSpec>) -> ToolSchema {
    ToolSchema::new(name, description, params).expect("catalog schemas are well-formed")
}

fn nonempty() -> ParamKind {
    ParamKind::String {
        pattern: None,
        min_len: Some(1),
        max_len: Some(4096),
    }
}

fn args_list() -> ParamKind {
    ParamKind::List {
        item: Box::new(ParamKind::string_matching(NO_NUL)),
        max_items: Some(256),
    }
}

pub fn run_command() -> ToolSchema {
    build(
        "run_command",
        "Run an allow-listed binary in the sandbox working directory.",
        vec![
            ParamSpec::required("binary", ParamKind::string_matching(ABSOLUTE_PATH))
                .describe("absolute path of the executable"),
            ParamSpec::optional("args", args_list()).describe("argument vector"),
            ParamSpec::optional("stdin", ParamKind::string())
                .describe("text fed to standard input"),
            ParamSpec::optional("timeout_seconds", ParamKind::integer(Some(1), Some(3600)))
                .describe("wall-time limit"),
        ],
    )
    .with_binary_param("binary")
    .expect("binary is a string param")
}

pub fn port_scan() -> ToolSchema {
    build(
        "port_scan",
        "Scan one TCP or UDP port on an in-scope IPv4 host.",
        vec![
            ParamSpec::required("target", ParamKind::Ipv4Target { cidrs: vec![] })
                .describe("IPv4 address"),
            ParamSpec::required("port", ParamKind::integer(Some(1), Some(65535)))
                .describe("port number"),
            ParamSpec::optional(
                "protocol",
                ParamKind::Enum {
                    variants: vec!["tcp".into(), "udp".into()],
                },
            ),
        ],
    )
}

pub fn parse_scan_report() -> ToolSchema {
    build(
        "parse_scan_report",
        "Parse a scanner XML report file into open-port records.",
        vec![ParamSpec::required("path", nonempty()).describe("report path in the sandbox")],
    )
}

pub fn triage() -> ToolSchema {
    build(
        "triage",
        "Classify a challenge artifact (file path or http(s) URL) by vulnerability category.",
        vec![ParamSpec::required("artifact", nonempty())],
    )
}

pub fn debug_start() -> ToolSchema {
    build(
        "debug_start",
        "Start the debugger on a binary and run to the first breakpoint.",
        vec![
            ParamSpec::required("binary", ParamKind::string_matching(ABSOLUTE_PATH)),
            ParamSpec::optional("args", args_list()),
            ParamSpec::optional("stdin", ParamKind::string()),
            ParamSpec::optional(
                "breakpoints",
                ParamKind::List {
                    item: Box::new(nonempty()),
                    max_items: Some(32),
                },
            )
            .describe("locations such as 'main' or 'file.c:12'"),
        ],
    )
    .with_binary_param("binary")
    .expect("binary is a string param")
}

pub fn inspect_heap() -> ToolSchema {
    build(
        "inspect_heap",
        "List allocator chunks of the stopped debuggee's main heap.",
        vec![
            ParamSpec::required("count", ParamKind::integer(Some(0), None))
                .describe("maximum chunks to return"),
        ],
    )
}

pub fn debug_stop() -> ToolSchema {
    build("debug_stop", "End the debug session.", vec![])
}

pub fn get_xrefs() -> ToolSchema {
    build(
        "get_xrefs",
        "Cross-references to a function, from the decompiler backend.",
        vec![ParamSpec::required(
            "func_name",
            ParamKind::string_matching(IDENTIFIER),
        )],
    )
}

pub fn solve_path() -> ToolSchema {
    build(
        "solve_path",
        "Find stdin that drives the binary to an address while avoiding others.",
        vec![
            ParamSpec::required("binary", ParamKind::string_matching(ABSOLUTE_PATH)),
            ParamSpec::required("addr", ParamKind::HexAddress).describe("target address"),
            ParamSpec::optional(
                "avoid",
                ParamKind::List {
                    item: Box::new(ParamKind::HexAddress),
                    max_items: Some(64),
                },
            ),
            ParamSpec::optional("stdin_length_cap", ParamKind::integer(Some(1), Some(4096))),
            ParamSpec::optional(
                "time_budget_seconds",
                ParamKind::integer(Some(1), Some(3600)),
            ),
        ],
    )
    .with_binary_param("binary")
    .expect("binary is a string param")
}

pub fn solve_by_output() -> ToolSchema {
    build(
        "solve_by_output",
        "Find stdin that makes the binary print the expected output.",
        vec![
            ParamSpec::required("binary", ParamKind::string_matching(ABSOLUTE_PATH)),
            ParamSpec::required("expected_output", nonempty()),
            ParamSpec::optional("stdin_length_cap", ParamKind::integer(Some(1), Some(4096))),
            ParamSpec::optional(
                "time_budget_seconds",
                ParamKind::integer(Some(1), Some(3600)),
            ),
        ],
    )
    .with_binary_param("binary")
    .expect("binary is a string param")
}

/// Plain-text schema sheet: one header line per tool, one line per parameter.
pub fn render_schema_sheet(schemas: &[ToolSchema]) -> String {
    let mut out = String::from("# Tool schemas\n");
    let mut last_server = None;
    for s in schemas {
        let server = ServerKind::ALL
            .into_iter()
            .find(|k| k.tools().iter().any(|t| t.tool_name() == s.tool_name()));
        if server != last_server {
            if let Some(k) = server {
                out.push_str(&format!("\n## {} server\n", k.as_str()));
            }
            last_server = server;
        }
        out.push_str(&format!("{}: {}\n", s.tool_name(), s.description()));
        for p in s.params() {
            let req = if p.required { "required" } else { "optional" };
            out.push_str(&format!("  - {} ({req}): {}\n", p.name, p.kind.describe()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique() {
        let mut names: Vec<String> = catalog()
            .iter()
            .map(|s| s.tool_name().to_string())
            .collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn kinds_parse() {
        for k in ServerKind::ALL {
            assert_eq!(k.as_str().parse::<ServerKind>().unwrap(), k);
        }
    }
}
