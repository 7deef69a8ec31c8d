//! Native tool servers of the execution layer.

pub mod catalog;
pub mod command;
pub mod debug;
pub mod heap;
pub mod mi;
pub mod scan;
pub mod server;
pub mod triage;

pub use catalog::{catalog, ServerKind};
pub use command::{run_command, CommandError, CommandResult, CommandSpec};
pub use heap::{HeapChunk, HeapReport};
pub use mi::{parse_mi_record, MiRecord, MiValue};
pub use scan::{parse_scan_report, PortScanReport, PortState};
pub use triage::{triage_classify, Category, TriageReport};
