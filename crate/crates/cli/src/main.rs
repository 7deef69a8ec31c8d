//! `ctfgate`: tool servers, the gateway endpoint, single episodes and the
//! benchmark matrix.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ctfgate_core::agent::{trim_trace, AgentConfig, Checkpoint, Episode, Selection, StopReason};
use ctfgate_core::gateway::front::{listen, Listen};
use ctfgate_core::gateway::manifest::{default_servers, load_manifest};
use ctfgate_core::gateway::trace::FileSink;
use ctfgate_core::gateway::{Gateway, RegistryError, ScopePolicy, Tracer};
use ctfgate_core::harness::{
    conditions_of, emit_report, load_suite, load_trials, run_matrix, MatrixConfig, ReasonerSpec,
    SummaryTable, TrialConfig, TRIALS_FILE,
};
use ctfgate_core::reasoner::{
    load_doc_pack, Condition, Reasoner, RemoteConfig, RemoteReasoner, Script, ScriptedReasoner,
};

#[derive(Parser)]
#[command(
    name = "ctfgate",
    version,
    about = "Schema-gated tool orchestration for CTF solving"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one native tool server on stdio.
    Serve {
        /// commands, secops, debug, decompiler or echo.
        kind: String,
        /// Tool names advertised by the echo server.
        tools: Vec<String>,
    },
    /// Expose the gateway to an out-of-process agent.
    Gateway(GatewayArgs),
    /// Run one episode.
    Episode(EpisodeArgs),
    /// Benchmark matrix and statistics.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct ServerArgs {
    /// Tool-server manifest (TOML); defaults to the five standard servers.
    #[arg(long)]
    tools: Option<PathBuf>,
    /// Working directory for tool servers.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// `stdio` or `tcp:<addr>`.
    #[arg(long, default_value = "stdio")]
    listen: String,
    #[arg(long, default_value = "gateway")]
    session: String,
    #[command(flatten)]
    servers: ServerArgs,
}

#[derive(Args)]
struct EpisodeArgs {
    #[arg(long, default_value = "Find the flag")]
    objective: String,
    /// `scripted:<path>` or `remote[:<url>]` (URL and key also come from
    /// CTFGATE_REMOTE_URL and CTFGATE_REMOTE_KEY).
    #[arg(long)]
    reasoner: String,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 60.0)]
    timeout_min: f64,
    #[arg(long, default_value_t = 10.0)]
    checkpoint_every_min: f64,
    /// Checkpoint file; defaults to the trace path with `.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample from the projected distribution instead of taking the argmax.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = ctfgate_core::agent::DEFAULT_MAX_STEPS)]
    max_steps: u64,
    /// Guidance condition whose doc pack the reasoner receives.
    #[arg(long, default_value = "baseline")]
    condition: Condition,
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/docpacks"))]
    docpacks: PathBuf,
    #[arg(long, default_value = "episode")]
    session: String,
    #[command(flatten)]
    servers: ServerArgs,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run every challenge under every condition.
    Run(BenchRunArgs),
    /// Recompute the summary from persisted trial results.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        /// Report directory; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BenchRunArgs {
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/suite"))]
    suite: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "baseline,templates,lessons,minimal"
    )]
    conditions: Vec<Condition>,
    #[arg(long, default_value_t = 3)]
    trials: u32,
    #[arg(long, default_value_t = 60.0)]
    timeout_min: f64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ctfgate_core::agent::DEFAULT_MAX_STEPS)]
    max_steps: u64,
    /// `scripted` (each challenge's solve script), `script:<path>` or
    /// `remote[:<url>]`.
    #[arg(long, default_value = "scripted")]
    reasoner: String,
    #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/docpacks"))]
    docpacks: PathBuf,
    /// Parent of per-trial sandboxes; paths are deterministic so traces
    /// from equal seeds compare byte for byte.
    #[arg(long)]
    sandbox_root: Option<PathBuf>,
}

fn minutes(m: f64) -> Result<Duration> {
    if !(m > 0.0 && m.is_finite()) {
        bail!("duration must be a positive number of minutes, got {m}");
    }
    Ok(Duration::from_secs_f64(m * 60.0))
}

fn launcher() -> Result<Vec<String>> {
    let exe = std::env::current_exe().context("locating the ctfgate executable")?;
    Ok(vec![exe.to_string_lossy().into_owned(), "serve".into()])
}

fn build_gateway(policy: ScopePolicy, tracer: Tracer, servers: &ServerArgs) -> Result<Gateway> {
    let workdir = servers
        .workdir
        .canonicalize()
        .with_context(|| format!("workdir {}", servers.workdir.display()))?;
    let mut gw = Gateway::new(policy, tracer, &workdir);
    let descs = match &servers.tools {
        Some(p) => load_manifest(p)?,
        None => default_servers(&launcher()?),
    };
    for d in descs {
        match gw.register_server(d) {
            Ok(_) => {}
            Err(e @ RegistryError::UnreachableEndpoint { .. }) => {
                log::warn!("{e}; its tools are degraded")
            }
            Err(e) => return Err(e.into()),
        }
    }
    gw.check_scope_coverage()?;
    Ok(gw)
}

fn run_gateway(a: GatewayArgs) -> Result<()> {
    let policy = ScopePolicy::load(&a.policy)?;
    let on = Listen::parse(&a.listen).map_err(anyhow::Error::msg)?;
    let tracer = Tracer::to_file(&a.session, &a.trace)
        .with_context(|| format!("trace {}", a.trace.display()))?;
    let mut gw = build_gateway(policy, tracer, &a.servers)?;
    let r = listen(&mut gw, on);
    gw.shutdown();
    Ok(r?)
}

fn episode_reasoner(
    spec: &str,
    pack: ctfgate_core::reasoner::DocPack,
) -> Result<Box<dyn Reasoner>> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let script = Script::load(Path::new(path)).map_err(anyhow::Error::msg)?;
        return Ok(Box::new(ScriptedReasoner::new(script)));
    }
    if spec == "remote" || spec.starts_with("remote:") {
        let cfg =
            RemoteConfig::from_env(spec.strip_prefix("remote:")).map_err(anyhow::Error::msg)?;
        return Ok(Box::new(RemoteReasoner::new(cfg, Some(pack))));
    }
    bail!("reasoner must be 'scripted:<path>' or 'remote[:<url>]', got '{spec}'")
}

fn run_episode(a: EpisodeArgs) -> Result<StopReason> {
    let policy = ScopePolicy::load(&a.policy)?;
    let pack = load_doc_pack(a.condition, &a.docpacks)?;
    let mut reasoner = episode_reasoner(&a.reasoner, pack.clone())?;
    let checkpoint_path = a
        .checkpoint
        .clone()
        .unwrap_or_else(|| a.trace.with_extension("ckpt"));
    let cfg = AgentConfig {
        episode_timeout: minutes(a.timeout_min)?,
        checkpoint_every: Some(minutes(a.checkpoint_every_min)?),
        checkpoint_path: Some(checkpoint_path),
        max_steps: a.max_steps,
        seed: a.seed,
        selection: if a.sample {
            Selection::Sample
        } else {
            Selection::Greedy
        },
        doc_pack: Some(pack.reference()),
        ..AgentConfig::default()
    };

    let resumed = match &a.resume {
        Some(p) => {
            let cp = Checkpoint::load(p)?;
            let dropped = trim_trace(&a.trace, cp.trace_next_seq).context("trimming the trace")?;
            if dropped > 0 {
                log::info!("dropped {dropped} trace events recorded after the checkpoint");
            }
            Some(cp)
        }
        None => None,
    };
    let tracer = match &resumed {
        Some(cp) => Tracer::resume(
            &cp.session,
            Box::new(FileSink::open(&a.trace)?),
            cp.trace_next_seq,
        ),
        None => {
            if a.trace.exists() {
                bail!(
                    "trace {} already exists; pass --resume to continue it",
                    a.trace.display()
                );
            }
            Tracer::to_file(&a.session, &a.trace)?
        }
    };
    if !a.condition.has_triage() {
        log::info!("condition {} runs without triage", a.condition);
    }
    let mut gw = build_gateway(policy, tracer, &a.servers)?;
    if !a.condition.has_triage() {
        gw.unregister_tool("triage");
    }
    let stop = {
        let mut ep = match &resumed {
            Some(cp) => Episode::resume(cp, cfg, &mut gw, reasoner.as_mut())?,
            None => Episode::new(&a.objective, cfg, &mut gw, reasoner.as_mut())?,
        };
        ep.run()?
    };
    gw.shutdown();
    Ok(stop)
}

fn reasoner_spec(spec: &str) -> Result<ReasonerSpec> {
    if spec == "scripted" {
        return Ok(ReasonerSpec::Scripted);
    }
    if let Some(p) = spec.strip_prefix("script:") {
        return Ok(ReasonerSpec::ScriptFile(PathBuf::from(p)));
    }
    if spec == "remote" || spec.starts_with("remote:") {
        let cfg =
            RemoteConfig::from_env(spec.strip_prefix("remote:")).map_err(anyhow::Error::msg)?;
        return Ok(ReasonerSpec::Remote(cfg));
    }
    bail!("reasoner must be 'scripted', 'script:<path>' or 'remote[:<url>]', got '{spec}'")
}

fn render_summary(s: &SummaryTable) -> Result<String, std::fmt::Error> {
    let mut out = String::new();
    writeln!(
        out,
        "{:<10} {:>5} {:>5} {:>7} {:>8} {:>17} {:>10}",
        "condition", "k", "n", "invalid", "rate", "wilson 95%", "mean min"
    )?;
    for r in &s.rows {
        let rate = r
            .rate
            .map(|x| format!("{:.1}%", x * 100.0))
            .unwrap_or_else(|| "-".into());
        let wilson = r
            .wilson
            .map(|(lo, hi)| format!("[{lo:.3}, {hi:.3}]"))
            .unwrap_or_else(|| "-".into());
        let mean = r
            .mean_duration_min
            .map(|m| format!("{m:.2}"))
            .unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<10} {:>5} {:>5} {:>7} {:>8} {:>17} {:>10}",
            r.condition.label(),
            r.successes,
            r.trials,
            r.invalid,
            rate,
            wilson,
            mean
        )?;
    }
    if let Some(t) = &s.chi_square {
        writeln!(
            out,
            "chi-square: statistic {:.4}, df {}, p {:.4}",
            t.statistic, t.df, t.p_value
        )?;
    }
    if let Some(t) = &s.kruskal_wallis {
        writeln!(
            out,
            "kruskal-wallis: H {:.4}, df {}, p {:.4}",
            t.statistic, t.df, t.p_value
        )?;
    }
    for e in &s.cohens_d {
        if let Some(d) = e.d {
            writeln!(out, "cohen's d {} vs {}: {:.3}", e.a, e.b, d)?;
        }
    }
    for n in &s.notes {
        writeln!(out, "note: {n}")?;
    }
    if !s.holes.is_empty() {
        writeln!(out, "invalid trials: {}", s.holes.join(", "))?;
    }
    Ok(out)
}

/// Writes to stdout; a closed reader is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn bench_run(a: BenchRunArgs) -> Result<()> {
    let suite = load_suite(&a.suite)?;
    if suite.is_empty() {
        bail!("no challenges under {}", a.suite.display());
    }
    std::fs::create_dir_all(&a.out)?;
    let results_path = a.out.join(TRIALS_FILE);
    if results_path.exists() {
        bail!(
            "{} already exists; choose a fresh --out",
            results_path.display()
        );
    }
    let trial = TrialConfig {
        sandbox_root: a
            .sandbox_root
            .unwrap_or_else(|| std::env::temp_dir().join("ctfgate-sandboxes")),
        trace_dir: a.out.join("traces"),
        docpack_root: a.docpacks,
        launcher: launcher()?,
        timeout: minutes(a.timeout_min)?,
        max_steps: a.max_steps,
        reasoner: reasoner_spec(&a.reasoner)?,
        servers: None,
    };
    let cfg = MatrixConfig {
        trials: a.trials,
        base_seed: a.seed,
        workers: a.workers,
        trial,
        results_path: Some(results_path),
    };
    let run = run_matrix(&suite, &a.conditions, &cfg)?;
    emit_report(&run.summary, &run.results, &a.out)?;
    emit(&render_summary(&run.summary)?)
}

fn bench_stats(input: &Path, out: Option<&Path>) -> Result<()> {
    let trials = load_trials(input)
        .with_context(|| format!("reading {}", input.join(TRIALS_FILE).display()))?;
    let summary = SummaryTable::from_results(&trials, &conditions_of(&trials));
    emit_report(&summary, &trials, out.unwrap_or(input))?;
    emit(&render_summary(&summary)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Serve { kind, tools } => {
            ctfgate_core::tools::server::run_stdio_server(&kind, &tools).map_err(anyhow::Error::msg)
        }
        Command::Gateway(a) => run_gateway(a),
        Command::Episode(a) => {
            let stop = run_episode(a)?;
            emit(&(serde_json::to_string(&stop)? + "\n"))
        }
        Command::Bench(BenchCommand::Run(a)) => bench_run(a),
        Command::Bench(BenchCommand::Stats { input, out }) => bench_stats(&input, out.as_deref()),
    }
}
