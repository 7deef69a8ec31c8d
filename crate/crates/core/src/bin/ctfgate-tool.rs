//! Standalone tool server: `ctfgate-tool <kind> [tool names for echo]`.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some((kind, extra)) = args.split_first() else {
        eprintln!("usage: ctfgate-tool <commands|secops|debug|decompiler|echo> [tool…]");
        std::process::exit(2);
    };
    if let Err(e) = ctfgate_core::tools::server::run_stdio_server(kind, extra) {
        eprintln!("ctfgate-tool: {e}");
        std::process::exit(1);
    }
}
