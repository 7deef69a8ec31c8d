//! One challenge attempt: sandbox, servers, episode, reward, teardown.

use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::manifest::{ChallengeManifest, SANDBOX_PLACEHOLDER};
use crate::agent::{AgentConfig, Episode, FlagPattern, Observation, StopKind, StopReason};
use crate::gateway::manifest::default_servers;
use crate::gateway::{EndpointDescriptor, Gateway, RegistryError, Tracer};
use crate::reasoner::{
    load_doc_pack, Condition, Reasoner, RemoteConfig, RemoteReasoner, Script, ScriptedReasoner,
};
use crate::tools::command::{die_with_parent, kill_group, supervise, CAPTURE_CAP};
use crate::tools::triage::Category;

const SETUP_TIMEOUT: Duration = Duration::from_secs(120);
const SERVICE_READY_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub enum ReasonerSpec {
    /// The manifest's own solve script.
    Scripted,
    /// A script file shared by every challenge.
    ScriptFile(PathBuf),
    Remote(RemoteConfig),
}

#[derive(Debug, Clone)]
pub struct TrialConfig {
    /// Trials get `<root>/<challenge>-<condition>-t<trial>`.
    pub sandbox_root: PathBuf,
    pub trace_dir: PathBuf,
    pub docpack_root: PathBuf,
    /// Command prefix that starts a native tool server when given its kind.
    pub launcher: Vec<String>,
    pub timeout: Duration,
    pub max_steps: u64,
    pub reasoner: ReasonerSpec,
    /// Overrides the default five servers.
    pub servers: Option<Vec<EndpointDescriptor>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub challenge: String,
    pub category: Category,
    pub condition: Condition,
    pub trial: u32,
    pub seed: u64,
    /// False when the environment could not be brought up; such trials
    /// count toward nothing.
    pub valid: bool,
    pub success: u8,
    pub duration_min: f64,
    /// Stop kind, or `invalid`.
    pub stop: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    pub trace: PathBuf,
}

/// 1 if any salient value of any observation fully matches the pattern.
pub fn check_reward(observations: &[Observation], flag: &FlagPattern) -> u8 {
    fn any_match(v: &serde_json::Value, flag: &FlagPattern) -> bool {
        match v {
            serde_json::Value::String(s) => flag.is_full_match(s),
            serde_json::Value::Array(a) => a.iter().any(|x| any_match(x, flag)),
            serde_json::Value::Object(m) => m.values().any(|x| any_match(x, flag)),
            _ => false,
        }
    }
    observations
        .iter()
        .any(|o| o.salient.values().any(|v| any_match(v, flag))) as u8
}

pub fn trial_name(challenge: &str, condition: Condition, trial: u32) -> String {
    format!("{challenge}-{condition}-t{trial}")
}

struct Environment {
    sandbox: PathBuf,
    created: bool,
    service: Option<Child>,
}

impl Environment {
    fn setup(m: &ChallengeManifest, sandbox: &Path) -> Result<Self, (Self, String)> {
        let mut env = Environment {
            sandbox: sandbox.to_path_buf(),
            created: false,
            service: None,
        };
        match env.bring_up(m) {
            Ok(()) => Ok(env),
            Err(e) => Err((env, e)),
        }
    }

    fn bring_up(&mut self, m: &ChallengeManifest) -> Result<(), String> {
        if let Some(parent) = self.sandbox.parent() {
            std::fs::create_dir_all(parent).map_err(|e| format!("sandbox root: {e}"))?;
        }
        std::fs::create_dir(&self.sandbox)
            .map_err(|e| format!("sandbox {}: {e}", self.sandbox.display()))?;
        self.created = true;
        for f in &m.files {
            let to = self.sandbox.join(f);
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
            }
            std::fs::copy(m.dir.join(f), &to).map_err(|e| format!("copying {f}: {e}"))?;
        }
        for c in &m.setup {
            run_step(c, &self.sandbox).map_err(|e| format!("setup {e}"))?;
        }
        if let Some(svc) = &m.service {
            let mut cmd = Command::new(&svc.command[0]);
            cmd.args(&svc.command[1..])
                .current_dir(&self.sandbox)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .process_group(0);
            die_with_parent(&mut cmd);
            self.service = Some(
                cmd.spawn()
                    .map_err(|e| format!("service {:?}: {e}", svc.command))?,
            );
            let ready = self.sandbox.join(&svc.ready_path);
            let deadline = Instant::now() + SERVICE_READY_TIMEOUT;
            while !ready.exists() {
                if Instant::now() > deadline {
                    return Err(format!("service never created {}", svc.ready_path));
                }
                std::thread::sleep(Duration::from_millis(20));
            }
        }
        Ok(())
    }

    fn teardown(mut self, m: &ChallengeManifest) {
        if !self.created {
            return;
        }
        for c in &m.teardown {
            if let Err(e) = run_step(c, &self.sandbox) {
                log::warn!("teardown {e}");
            }
        }
        if let Some(mut child) = self.service.take() {
            kill_group(child.id() as i32);
            let _ = child.wait();
        }
        if let Err(e) = std::fs::remove_dir_all(&self.sandbox) {
            log::warn!("removing {}: {e}", self.sandbox.display());
        }
    }
}

fn run_step(argv: &[String], dir: &Path) -> Result<(), String> {
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..]).current_dir(dir);
    let out =
        supervise(cmd, None, SETUP_TIMEOUT, CAPTURE_CAP).map_err(|e| format!("{argv:?}: {e}"))?;
    if out.timed_out {
        return Err(format!("{argv:?} timed out"));
    }
    if !out.status.success() {
        return Err(format!(
            "{argv:?} failed ({}): {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(())
}

fn build_reasoner(
    m: &ChallengeManifest,
    cond: Condition,
    sandbox: &Path,
    cfg: &TrialConfig,
) -> Result<Box<dyn Reasoner>, String> {
    let script_path = match &cfg.reasoner {
        ReasonerSpec::Remote(rc) => {
            let pack = load_doc_pack(cond, &cfg.docpack_root).map_err(|e| e.to_string())?;
            return Ok(Box::new(RemoteReasoner::new(rc.clone(), Some(pack))));
        }
        ReasonerSpec::Scripted => m.dir.join(
            m.script
                .as_ref()
                .ok_or_else(|| format!("challenge '{}' has no solve script", m.id))?,
        ),
        ReasonerSpec::ScriptFile(p) => p.clone(),
    };
    let text = std::fs::read_to_string(&script_path)
        .map_err(|e| format!("{}: {e}", script_path.display()))?;
    let script = Script::from_json(&text.replace(SANDBOX_PLACEHOLDER, &sandbox.to_string_lossy()))
        .map_err(|e| format!("{}: {e}", script_path.display()))?;
    Ok(Box::new(ScriptedReasoner::new(script)))
}

/// What the episode left behind, or why the trial is invalid.
type EpisodeOutcome = Result<(StopReason, Vec<Observation>), String>;

fn run_episode(
    m: &ChallengeManifest,
    cond: Condition,
    seed: u64,
    session: &str,
    sandbox: &Path,
    trace: &Path,
    cfg: &TrialConfig,
) -> EpisodeOutcome {
    let policy = m.scope_policy(sandbox).map_err(|e| e.to_string())?;
    let pack = load_doc_pack(cond, &cfg.docpack_root).map_err(|e| e.to_string())?;
    let mut reasoner = build_reasoner(m, cond, sandbox, cfg)?;
    if trace.exists() {
        std::fs::remove_file(trace).map_err(|e| e.to_string())?;
    }
    let tracer =
        Tracer::to_file(session, trace).map_err(|e| format!("trace {}: {e}", trace.display()))?;
    let mut gw = Gateway::new(policy, tracer, sandbox);
    let servers = cfg
        .servers
        .clone()
        .unwrap_or_else(|| default_servers(&cfg.launcher));
    for desc in servers {
        match gw.register_server(desc) {
            Ok(_) | Err(RegistryError::UnreachableEndpoint { .. }) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    if !cond.has_triage() {
        gw.unregister_tool("triage");
    }
    gw.check_scope_coverage().map_err(|e| e.to_string())?;

    let agent_cfg = AgentConfig {
        episode_timeout: cfg.timeout,
        max_steps: cfg.max_steps,
        seed,
        flag_pattern: m.flag(),
        doc_pack: Some(pack.reference()),
        checkpoint_every: None,
        ..AgentConfig::default()
    };
    let mut episode = Episode::new(&m.objective, agent_cfg, &mut gw, reasoner.as_mut())
        .map_err(|e| e.to_string())?;
    let stop = episode.run().map_err(|e| e.to_string())?;
    let observations = episode
        .state()
        .history
        .entries()
        .iter()
        .map(|e| e.observation.clone())
        .collect();
    drop(episode);
    gw.shutdown();
    Ok((stop, observations))
}

/// Runs one trial. Environment failures give an invalid result rather than
/// a failed one; teardown runs either way.
pub fn run_trial(
    m: &ChallengeManifest,
    cond: Condition,
    trial: u32,
    seed: u64,
    cfg: &TrialConfig,
) -> TrialResult {
    let name = trial_name(&m.id, cond, trial);
    let sandbox = cfg.sandbox_root.join(&name);
    let trace = cfg.trace_dir.join(format!("{name}.jsonl"));
    let session = format!("{name}-s{seed}");
    let mut result = TrialResult {
        challenge: m.id.clone(),
        category: m.category,
        condition: cond,
        trial,
        seed,
        valid: false,
        success: 0,
        duration_min: 0.0,
        stop: "invalid".into(),
        detail: String::new(),
        flag: None,
        trace: trace.clone(),
    };
    if let Err(e) = std::fs::create_dir_all(&cfg.trace_dir) {
        result.detail = format!("trace dir: {e}");
        return result;
    }
    let env = match Environment::setup(m, &sandbox) {
        Ok(env) => env,
        Err((env, reason)) => {
            env.teardown(m);
            result.detail = format!("environment setup failed: {reason}");
            return result;
        }
    };
    let started = Instant::now();
    let outcome = run_episode(m, cond, seed, &session, &sandbox, &trace, cfg);
    let elapsed = started.elapsed();
    env.teardown(m);
    match outcome {
        Ok((stop, observations)) => {
            let reward = check_reward(&observations, &m.flag());
            let captured = stop.kind == StopKind::FlagCaptured;
            debug_assert_eq!(reward == 1, captured, "reward and stop reason disagree");
            result.valid = true;
            result.success = (captured && reward == 1) as u8;
            result.duration_min = elapsed.as_secs_f64() / 60.0;
            result.stop = stop.kind.as_str().into();
            result.detail = stop.detail;
            result.flag = stop.flag;
        }
        Err(reason) => result.detail = format!("episode could not run: {reason}"),
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::schema::CallId;
    use serde_json::json;

    fn obs(salient: serde_json::Value) -> Observation {
        Observation {
            call_id: CallId::new("c"),
            source: "run_command".into(),
            salient: serde_json::from_value(salient).unwrap(),
            raw: None,
            raw_digest: String::new(),
            token_cost: 0,
            truncated: false,
        }
    }

    #[test]
    fn reward_needs_a_full_match() {
        let p = FlagPattern::default();
        assert_eq!(check_reward(&[obs(json!({"flags": ["flag{abc}"]}))], &p), 1);
        assert_eq!(check_reward(&[obs(json!({"exit_code": 0}))], &p), 0);
        assert_eq!(
            check_reward(&[obs(json!({"stdout_line": "ctf{abc}"}))], &p),
            0
        );
        assert_eq!(check_reward(&[], &p), 0);
    }
}
