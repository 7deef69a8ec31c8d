//! Port-scanner XML report parsing (the `nmaprun` dialect).

use std::collections::BTreeSet;

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortState {
    Open,
    Closed,
    Filtered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Service {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub product: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortEntry {
    pub port: u16,
    pub protocol: String,
    pub state: PortState,
    /// The scanner's own state word when it was folded (e.g. `open|filtered`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_state: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service: Option<Service>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortScanReport {
    pub host: String,
    pub ports: Vec<PortEntry>,
}

impl PortScanReport {
    pub fn open_ports(&self) -> impl Iterator<Item = &PortEntry> {
        self.ports.iter().filter(|p| p.state == PortState::Open)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScanError {
    #[error("scan report parse error at byte {offset}: {message}")]
    ParseError { offset: u64, message: String },
    #[error("not a scan report: {0}")]
    SchemaMismatch(String),
}

/// Maps a scanner state word; ambiguous states fold to `Filtered`.
pub fn map_state(raw: &str) -> Option<PortState> {
    Some(match raw {
        "open" => PortState::Open,
        "closed" => PortState::Closed,
        "filtered" | "open|filtered" | "closed|filtered" | "unfiltered" => PortState::Filtered,
        _ => return None,
    })
}

#[derive(Default)]
struct HostAcc {
    addr: Option<String>,
    ports: Vec<PortEntry>,
    seen: BTreeSet<(u16, String)>,
}

#[derive(Default)]
struct PortAcc {
    port: Option<u16>,
    protocol: String,
    state: Option<String>,
    service: Option<Service>,
}

/// Parses one XML document into one report per IPv4 host, in document order.
pub fn parse_scan_report(doc: &str) -> Result<Vec<PortScanReport>, ScanError> {
    let mut reader = Reader::from_str(doc);
    let mut reports = Vec::new();
    let mut depth = 0usize;
    let mut saw_root = false;
    let mut closed_root = false;
    let mut host: Option<HostAcc> = None;
    let mut port: Option<PortAcc> = None;

    let parse_err = |reader: &Reader<&[u8]>, message: String| ScanError::ParseError {
        offset: reader.buffer_position(),
        message,
    };

    loop {
        let ev = reader
            .read_event()
            .map_err(|e| parse_err(&reader, e.to_string()))?;
        let (start, empty) = match &ev {
            Event::Start(e) => (Some(e.clone()), false),
            Event::Empty(e) => (Some(e.clone()), true),
            Event::End(e) => {
                depth = depth.saturating_sub(1);
                let qname = e.name();
                let name: &str = qname.as_ref();
                match name {
                    "port" => {
                        if let (Some(p), Some(h)) = (port.take(), host.as_mut()) {
                            push_port(h, p).map_err(|m| parse_err(&reader, m))?;
                        }
                    }
                    "host" => finish_host(&mut reports, host.take()),
                    "nmaprun" if depth == 0 => closed_root = true,
                    _ => {}
                }
                (None, false)
            }
            Event::Eof => break,
            _ => (None, false),
        };
        let Some(el) = start else { continue };
        let name: String = AsRef::<str>::as_ref(&el.name()).to_string();
        if depth == 0 {
            if saw_root {
                return Err(parse_err(&reader, "multiple root elements".into()));
            }
            if name != "nmaprun" {
                return Err(ScanError::SchemaMismatch(format!(
                    "root element is <{name}>, expected <nmaprun>"
                )));
            }
            saw_root = true;
            if empty {
                closed_root = true;
            }
        }
        match name.as_str() {
            "host" => {
                finish_host(&mut reports, host.take());
                host = Some(HostAcc::default());
            }
            "address" => {
                if let Some(h) = host.as_mut() {
                    if attr(&el, "addrtype").as_deref() == Some("ipv4") {
                        h.addr = attr(&el, "addr");
                    }
                }
            }
            "port" => {
                let number = attr(&el, "portid")
                    .ok_or_else(|| parse_err(&reader, "port without portid".into()))?;
                let n: u16 = number.parse().ok().filter(|n| *n >= 1).ok_or_else(|| {
                    parse_err(&reader, format!("port number '{number}' out of range"))
                })?;
                port = Some(PortAcc {
                    port: Some(n),
                    protocol: attr(&el, "protocol").unwrap_or_else(|| "tcp".into()),
                    ..PortAcc::default()
                });
                if empty {
                    if let (Some(p), Some(h)) = (port.take(), host.as_mut()) {
                        push_port(h, p).map_err(|m| parse_err(&reader, m))?;
                    }
                }
            }
            "state" => {
                if let Some(p) = port.as_mut() {
                    p.state = attr(&el, "state");
                }
            }
            "service" => {
                if let Some(p) = port.as_mut() {
                    if let Some(name) = attr(&el, "name") {
                        p.service = Some(Service {
                            name,
                            product: attr(&el, "product"),
                            version: attr(&el, "version"),
                        });
                    }
                }
            }
            _ => {}
        }
        if !empty {
            depth += 1;
        }
    }
    if !saw_root {
        return Err(ScanError::SchemaMismatch(
            "document has no root element".into(),
        ));
    }
    if !closed_root || depth != 0 {
        return Err(ScanError::ParseError {
            offset: doc.len() as u64,
            message: "document is truncated".into(),
        });
    }
    Ok(reports)
}

fn attr(el: &BytesStart<'_>, key: &str) -> Option<String> {
    el.try_get_attribute(key).ok().flatten().and_then(|a| {
        a.normalized_value(XmlVersion::Implicit1_0)
            .ok()
            .map(|v| v.into_owned())
    })
}

fn push_port(h: &mut HostAcc, p: PortAcc) -> Result<(), String> {
    let port = p.port.expect("set at <port>");
    let raw = p.state.ok_or_else(|| format!("port {port} has no state"))?;
    let state = map_state(&raw).ok_or_else(|| format!("port {port} has unknown state '{raw}'"))?;
    if h.seen.insert((port, p.protocol.clone())) {
        h.ports.push(PortEntry {
            port,
            protocol: p.protocol,
            raw_state: (raw != state_word(state)).then_some(raw),
            state,
            service: p.service,
        });
    }
    Ok(())
}

fn state_word(s: PortState) -> &'static str {
    match s {
        PortState::Open => "open",
        PortState::Closed => "closed",
        PortState::Filtered => "filtered",
    }
}

fn finish_host(reports: &mut Vec<PortScanReport>, host: Option<HostAcc>) {
    if let Some(HostAcc {
        addr: Some(host),
        ports,
        ..
    }) = host
    {
        reports.push(PortScanReport { host, ports });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(ports: &str) -> String {
        format!(
            r#"<?xml version="1.0"?><nmaprun scanner="nmap"><host><status state="up"/><address addr="10.0.0.5" addrtype="ipv4"/><ports>{ports}</ports></host></nmaprun>"#
        )
    }

    #[test]
    fn single_open_port() {
        let r = parse_scan_report(&doc(
            r#"<port protocol="tcp" portid="22"><state state="open"/><service name="ssh" product="OpenSSH" version="8.9"/></port>"#,
        ))
        .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].host, "10.0.0.5");
        assert_eq!(
            r[0].ports,
            vec![PortEntry {
                port: 22,
                protocol: "tcp".into(),
                state: PortState::Open,
                raw_state: None,
                service: Some(Service {
                    name: "ssh".into(),
                    product: Some("OpenSSH".into()),
                    version: Some("8.9".into()),
                }),
            }]
        );
    }

    #[test]
    fn zero_ports() {
        let r = parse_scan_report(&doc("")).unwrap();
        assert!(r[0].ports.is_empty());
    }

    #[test]
    fn truncated_is_parse_error() {
        let full = doc(r#"<port protocol="tcp" portid="22"><state state="open"/></port>"#);
        let cut = &full[..full.len() - 20];
        assert!(matches!(
            parse_scan_report(cut),
            Err(ScanError::ParseError { .. })
        ));
    }

    #[test]
    fn wrong_dialect() {
        assert!(matches!(
            parse_scan_report("<html><body/></html>"),
            Err(ScanError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn folded_states_and_duplicates() {
        let r = parse_scan_report(&doc(
            r#"<port protocol="udp" portid="53"><state state="open|filtered"/></port>
               <port protocol="udp" portid="53"><state state="open|filtered"/></port>
               <port protocol="tcp" portid="53"><state state="closed"/></port>"#,
        ))
        .unwrap();
        assert_eq!(r[0].ports.len(), 2);
        assert_eq!(r[0].ports[0].state, PortState::Filtered);
        assert_eq!(r[0].ports[0].raw_state.as_deref(), Some("open|filtered"));
    }

    #[test]
    fn bad_port_number() {
        assert!(parse_scan_report(&doc(
            r#"<port protocol="tcp" portid="70000"><state state="open"/></port>"#
        ))
        .is_err());
        assert!(parse_scan_report(&doc(
            r#"<port protocol="tcp" portid="0"><state state="open"/></port>"#
        ))
        .is_err());
    }
}
