//! The episode controller: plan, propose, project, dispatch, observe.
//!
//! One dispatch is in flight at a time. The gateway owns the trace; the
//! controller adds `plan-update`, `checkpoint` and `stop` events to it.

pub mod checkpoint;
pub mod observation;
pub mod queue;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{DispatchOutcome, EventKind, Gateway, GatewayError, TraceError};
use crate::protocol::projection::{
    project_with, ActionDistribution, ProjectionError, WeightedCall,
};
use crate::protocol::schema::{CallId, ToolCall, ToolSchema};
use crate::protocol::validate::Rejection;
use crate::reasoner::{DocPackRef, Reasoner, ReasonerError, ReasonerRequest};

pub use checkpoint::{trim_trace, Checkpoint, CheckpointError};
pub use observation::{
    failure_observation, parse_observation, FlagPattern, Observation, DEFAULT_FLAG_PATTERN,
    DEFAULT_OBSERVATION_BUDGET,
};
pub use queue::{RetryOutcome, Task, TaskQueue, TaskStatus, DEFAULT_MAX_RETRIES};

pub const DEFAULT_EPISODE_TIMEOUT: Duration = Duration::from_secs(60 * 60);
pub const DEFAULT_CHECKPOINT_EVERY: Duration = Duration::from_secs(10 * 60);
pub const DEFAULT_MAX_STEPS: u64 = 200;
pub const DEFAULT_CONTEXT_BUDGET: usize = 6000;

/// One executed action and what came back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub action: ToolCall,
    pub observation: Observation,
}

/// Append-only record of executed actions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn push(&mut self, entry: HistoryEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Newest entries whose summed cost fits `budget` words, oldest first.
    pub fn compacted(&self, budget: usize) -> Vec<HistoryEntry> {
        let mut used = 0;
        let mut kept = Vec::new();
        for e in self.entries.iter().rev() {
            let cost = e.observation.token_cost
                + 1
                + observation::render_words(&Value::Object(e.action.arguments.clone()));
            if used + cost > budget {
                break;
            }
            used += cost;
            kept.push(e.clone());
        }
        kept.reverse();
        kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopKind {
    FlagCaptured,
    Timeout,
    SearchExhausted,
    BudgetExhausted,
}

impl StopKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StopKind::FlagCaptured => "flag-captured",
            StopKind::Timeout => "timeout",
            StopKind::SearchExhausted => "search-exhausted",
            StopKind::BudgetExhausted => "budget-exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopReason {
    pub kind: StopKind,
    pub detail: String,
    /// The captured flag; present exactly for `flag-captured`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl StopReason {
    fn new(kind: StopKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
            flag: None,
        }
    }

    /// 1 for a captured flag, 0 otherwise.
    pub fn reward(&self) -> u8 {
        (self.kind == StopKind::FlagCaptured) as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub objective: String,
    pub history: History,
    pub queue: TaskQueue,
    pub elapsed_ms: u64,
    pub step_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_rejection: Option<Rejection>,
    /// Position of the sampling stream, in 32-bit words.
    #[serde(default)]
    pub rng_word_pos: u64,
}

impl AgentState {
    pub fn new(objective: &str, queue: TaskQueue) -> Self {
        Self {
            objective: objective.to_string(),
            history: History::default(),
            queue,
            elapsed_ms: 0,
            step_count: 0,
            stop: None,
            last_rejection: None,
            rng_word_pos: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Highest projected weight.
    Greedy,
    /// Draw from the projected distribution with the seeded stream.
    Sample,
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub observation_budget: usize,
    /// Words of history mirrored into each reasoner request.
    pub context_budget: usize,
    pub episode_timeout: Duration,
    pub max_steps: u64,
    pub max_retries: u32,
    pub checkpoint_every: Option<Duration>,
    pub checkpoint_path: Option<PathBuf>,
    pub seed: u64,
    pub selection: Selection,
    pub flag_pattern: FlagPattern,
    pub doc_pack: Option<DocPackRef>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            observation_budget: DEFAULT_OBSERVATION_BUDGET,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            episode_timeout: DEFAULT_EPISODE_TIMEOUT,
            max_steps: DEFAULT_MAX_STEPS,
            max_retries: DEFAULT_MAX_RETRIES,
            checkpoint_every: Some(DEFAULT_CHECKPOINT_EVERY),
            checkpoint_path: None,
            seed: 0,
            selection: Selection::Greedy,
            flag_pattern: FlagPattern::default(),
            doc_pack: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("objective is empty")]
    EmptyObjective,
    #[error("reasoner returned an empty plan")]
    EmptyPlan,
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("episode already stopped")]
    Stopped,
}

impl From<TraceError> for AgentError {
    fn from(e: TraceError) -> Self {
        AgentError::Gateway(GatewayError::SinkUnavailable(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Executed; the observation was appended to history.
    Result(CallId),
    /// Dispatched but failed (timeout, outage, tool error); recorded as an
    /// observation.
    Failed(CallId),
    Rejected(CallId),
    /// No candidate was valid; the top one was submitted for its rejection.
    EmptyValidSet(CallId),
    /// The episode has a stop reason.
    Stopped,
}

pub struct Episode<'a> {
    cfg: AgentConfig,
    state: AgentState,
    gw: &'a mut Gateway,
    reasoner: &'a mut dyn Reasoner,
    rng: ChaCha8Rng,
    started: Instant,
    elapsed_base: Duration,
    last_checkpoint_ms: u64,
    catalog: Vec<ToolSchema>,
}

impl<'a> Episode<'a> {
    pub fn new(
        objective: &str,
        cfg: AgentConfig,
        gw: &'a mut Gateway,
        reasoner: &'a mut dyn Reasoner,
    ) -> Result<Self, AgentError> {
        if objective.trim().is_empty() {
            return Err(AgentError::EmptyObjective);
        }
        let state = AgentState::new(objective, TaskQueue::new(cfg.max_retries));
        Ok(Self::assemble(cfg, state, gw, reasoner))
    }

    /// Continues from `cp`. The gateway's tracer must already be positioned
    /// at the checkpoint's sequence number.
    pub fn resume(
        cp: &Checkpoint,
        mut cfg: AgentConfig,
        gw: &'a mut Gateway,
        reasoner: &'a mut dyn Reasoner,
    ) -> Result<Self, AgentError> {
        let next = gw.tracer().next_seq();
        if next != cp.trace_next_seq {
            return Err(CheckpointError::Corrupt(format!(
                "trace is at seq {next}, checkpoint expects {}",
                cp.trace_next_seq
            ))
            .into());
        }
        reasoner.restore(&cp.reasoner)?;
        cfg.seed = cp.seed;
        let mut ep = Self::assemble(cfg, cp.state.clone(), gw, reasoner);
        ep.last_checkpoint_ms = cp.state.elapsed_ms;
        Ok(ep)
    }

    fn assemble(
        cfg: AgentConfig,
        state: AgentState,
        gw: &'a mut Gateway,
        reasoner: &'a mut dyn Reasoner,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_word_pos(state.rng_word_pos as u128);
        let elapsed_base = Duration::from_millis(state.elapsed_ms);
        let started = Instant::now();
        gw.set_deadline(Some(
            started + cfg.episode_timeout.saturating_sub(elapsed_base),
        ));
        let catalog = gw.schemas();
        Self {
            cfg,
            state,
            gw,
            reasoner,
            rng,
            started,
            elapsed_base,
            last_checkpoint_ms: 0,
            catalog,
        }
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn elapsed(&self) -> Duration {
        self.elapsed_base + self.started.elapsed()
    }

    fn sync_clock(&mut self) {
        self.state.elapsed_ms = self.elapsed().as_millis() as u64;
    }

    fn emit(&self, kind: EventKind, payload: Value) -> Result<u64, AgentError> {
        Ok(self.gw.tracer().emit(kind, payload)?)
    }

    fn request(&self) -> ReasonerRequest {
        ReasonerRequest {
            objective: self.state.objective.clone(),
            step: self.state.step_count,
            catalog: self.catalog.clone(),
            history: self.state.history.compacted(self.cfg.context_budget),
            queue: self.state.queue.tasks().to_vec(),
            active_task: self.state.queue.active().map(|t| t.description.clone()),
            doc_pack: self.cfg.doc_pack.clone(),
            last_rejection: self.state.last_rejection.clone(),
        }
    }

    fn plan_update(&self, reason: &str, extra: Value) -> Result<(), AgentError> {
        let mut payload = json!({
            "reason": reason,
            "step": self.state.step_count,
            "active": self.state.queue.active().map(|t| t.id),
            "tasks": self.state.queue.tasks(),
        });
        if let (Value::Object(p), Value::Object(e)) = (&mut payload, extra) {
            p.extend(e);
        }
        self.emit(EventKind::PlanUpdate, payload)?;
        Ok(())
    }

    /// Asks for a task queue and installs it.
    pub fn plan(&mut self) -> Result<usize, AgentError> {
        let tasks = self.reasoner.plan(&self.request())?;
        if tasks.is_empty() {
            return Err(AgentError::EmptyPlan);
        }
        self.state.queue.replace_pending(&tasks);
        self.state.queue.activate_next();
        self.plan_update("plan", json!({}))?;
        Ok(tasks.len())
    }

    /// Re-plans after the queue ran dry or a task was abandoned. Stops the
    /// episode when nothing new comes back.
    fn replan(&mut self, why: &str) -> Result<bool, AgentError> {
        let tasks = match self.reasoner.plan(&self.request()) {
            Ok(t) => t,
            Err(e) => {
                self.stop_with(StopReason::new(
                    StopKind::SearchExhausted,
                    failure_detail(&e),
                ))?;
                return Ok(false);
            }
        };
        self.state.queue.replace_pending(&tasks);
        self.state.queue.activate_next();
        self.state.last_rejection = None;
        self.plan_update("replan", json!({"trigger": why}))?;
        if self.state.queue.is_exhausted() {
            self.stop_with(StopReason::new(
                StopKind::SearchExhausted,
                format!("re-plan after {why} produced no tasks"),
            ))?;
            return Ok(false);
        }
        Ok(true)
    }

    fn stop_with(&mut self, reason: StopReason) -> Result<(), AgentError> {
        self.sync_clock();
        self.emit(
            EventKind::Stop,
            json!({
                "kind": reason.kind,
                "detail": reason.detail,
                "flag": reason.flag,
                "steps": self.state.step_count,
                "history_len": self.state.history.len(),
                "elapsed_ms": self.state.elapsed_ms,
            }),
        )?;
        self.state.stop = Some(reason);
        Ok(())
    }

    /// Stop condition for the current state, if any: a captured flag, then
    /// the episode clock, then the step budget.
    pub fn check_termination(&self) -> Option<StopReason> {
        check_termination(&self.state, self.elapsed(), &self.cfg)
    }

    fn select(&mut self, projected: &ActionDistribution) -> ToolCall {
        let ranked = projected.ranked();
        let chosen = match self.cfg.selection {
            Selection::Greedy => ranked[0],
            Selection::Sample => {
                let u: f64 = self.rng.random();
                self.state.rng_word_pos = self.rng.get_word_pos() as u64;
                let mut acc = 0.0;
                ranked
                    .iter()
                    .copied()
                    .find(|e: &&WeightedCall| {
                        acc += e.weight;
                        u < acc
                    })
                    .unwrap_or(ranked[ranked.len() - 1])
            }
        };
        chosen.call.clone()
    }

    /// One Execute/Parse/Iterate cycle.
    pub fn step(&mut self) -> Result<StepOutcome, AgentError> {
        if self.state.stop.is_some() {
            return Ok(StepOutcome::Stopped);
        }
        if let Some(reason) = self.check_termination() {
            self.stop_with(reason)?;
            return Ok(StepOutcome::Stopped);
        }
        if self.state.queue.tasks().is_empty() {
            match self.plan() {
                Ok(_) => {}
                Err(AgentError::EmptyPlan) => {
                    self.stop_with(StopReason::new(
                        StopKind::SearchExhausted,
                        "initial plan is empty",
                    ))?;
                    return Ok(StepOutcome::Stopped);
                }
                Err(AgentError::Reasoner(e)) => {
                    self.stop_with(StopReason::new(
                        StopKind::SearchExhausted,
                        failure_detail(&e),
                    ))?;
                    return Ok(StepOutcome::Stopped);
                }
                Err(e) => return Err(e),
            }
        }
        if self.state.queue.activate_next().is_none() && !self.replan("queue exhausted")? {
            return Ok(StepOutcome::Stopped);
        }

        let request = self.request();
        self.state.step_count += 1;
        let step = self.state.step_count;
        let set = match self.reasoner.next_candidates(&request).and_then(|s| {
            s.check()
                .map(|_| s)
                .map_err(|reason| ReasonerError::Failure {
                    reason,
                    digest: None,
                })
        }) {
            Ok(s) => s,
            Err(e) => {
                self.stop_with(StopReason::new(
                    StopKind::SearchExhausted,
                    failure_detail(&e),
                ))?;
                return Ok(StepOutcome::Stopped);
            }
        };
        if !set.meta.is_null() {
            self.plan_update("reasoner-reply", json!({"meta": set.meta}))?;
        }

        let dist = set.to_distribution(&format!("c{step:04}"));
        let gw = &*self.gw;
        let projected = project_with(&dist, |c| {
            let (schema, scope) = gw.verdicts(c);
            schema.valid && scope.valid
        });
        let (call, empty) = match projected {
            Ok(p) => (self.select(&p), false),
            Err(ProjectionError::EmptyValidSet) => (dist.ranked()[0].call.clone(), true),
            Err(e) => unreachable!("candidate set was checked: {e}"),
        };

        let outcome = match self.gw.dispatch(&call)? {
            DispatchOutcome::Completed(result) => {
                let obs =
                    parse_observation(&result, self.cfg.observation_budget, &self.cfg.flag_pattern);
                self.record(step, call.clone(), obs);
                if set.task_done {
                    if let Some(id) = self.state.queue.complete_active() {
                        self.plan_update("task-done", json!({"task": id}))?;
                    }
                }
                StepOutcome::Result(call.call_id)
            }
            DispatchOutcome::Failed(failure) => {
                let obs = failure_observation(&failure, self.cfg.observation_budget);
                self.record(step, call.clone(), obs);
                StepOutcome::Failed(call.call_id)
            }
            DispatchOutcome::Rejected(rejection) => {
                self.handle_rejection(rejection)?;
                if empty {
                    StepOutcome::EmptyValidSet(call.call_id)
                } else {
                    StepOutcome::Rejected(call.call_id)
                }
            }
        };
        self.sync_clock();
        if self.state.stop.is_none() {
            if let Some(reason) = self.check_termination() {
                self.stop_with(reason)?;
            } else {
                self.maybe_checkpoint()?;
            }
        }
        Ok(outcome)
    }

    fn record(&mut self, step: u64, action: ToolCall, observation: Observation) {
        self.state.last_rejection = None;
        self.state.history.push(HistoryEntry {
            step,
            action,
            observation,
        });
    }

    /// Charges a rejection to the active task and feeds it back to the
    /// reasoner; abandonment triggers a re-plan.
    pub fn handle_rejection(&mut self, rejection: Rejection) -> Result<(), AgentError> {
        let call_id = rejection.call_id.clone();
        let stage = rejection.stage;
        self.state.last_rejection = Some(rejection);
        match self.state.queue.record_rejection() {
            Some(RetryOutcome::Retry(n)) => {
                self.plan_update(
                    "rejection",
                    json!({"call_id": call_id, "stage": stage, "retry_count": n}),
                )?;
            }
            Some(RetryOutcome::Abandoned) => {
                self.plan_update("abandoned", json!({"call_id": call_id, "stage": stage}))?;
                self.replan("abandonment")?;
            }
            None => {
                self.plan_update("rejection", json!({"call_id": call_id, "stage": stage}))?;
            }
        }
        Ok(())
    }

    fn maybe_checkpoint(&mut self) -> Result<(), AgentError> {
        let (Some(every), Some(path)) =
            (self.cfg.checkpoint_every, self.cfg.checkpoint_path.clone())
        else {
            return Ok(());
        };
        if self
            .state
            .elapsed_ms
            .saturating_sub(self.last_checkpoint_ms)
            >= every.as_millis() as u64
        {
            self.checkpoint()?.save(&path)?;
        }
        Ok(())
    }

    /// Captures the quiescent state and records a `checkpoint` event.
    pub fn checkpoint(&mut self) -> Result<Checkpoint, AgentError> {
        self.sync_clock();
        self.emit(
            EventKind::Checkpoint,
            json!({"step": self.state.step_count, "history_len": self.state.history.len()}),
        )?;
        self.last_checkpoint_ms = self.state.elapsed_ms;
        Ok(Checkpoint {
            version: checkpoint::CHECKPOINT_VERSION,
            session: self.gw.tracer().session(),
            seed: self.cfg.seed,
            trace_next_seq: self.gw.tracer().next_seq(),
            reasoner: self.reasoner.snapshot(),
            state: self.state.clone(),
        })
    }

    /// Steps until the episode stops.
    pub fn run(&mut self) -> Result<StopReason, AgentError> {
        while self.state.stop.is_none() {
            self.step()?;
        }
        Ok(self.state.stop.clone().expect("loop ends on stop"))
    }

    /// Steps until `step_count` reaches `n` or the episode stops.
    pub fn run_until_step(&mut self, n: u64) -> Result<Option<StopReason>, AgentError> {
        while self.state.stop.is_none() && self.state.step_count < n {
            self.step()?;
        }
        Ok(self.state.stop.clone())
    }
}

fn failure_detail(e: &ReasonerError) -> String {
    match e.digest() {
        Some(d) => format!("{e} (reply {d})"),
        None => e.to_string(),
    }
}

/// Stop condition for `state` at `elapsed`: a captured flag, then the
/// episode clock, then the step budget.
pub fn check_termination(
    state: &AgentState,
    elapsed: Duration,
    cfg: &AgentConfig,
) -> Option<StopReason> {
    let flag = state
        .history
        .entries()
        .iter()
        .flat_map(|e| e.observation.flags())
        .find(|f| cfg.flag_pattern.is_full_match(f));
    if let Some(flag) = flag {
        return Some(StopReason {
            kind: StopKind::FlagCaptured,
            detail: "flag pattern matched an observation".into(),
            flag: Some(flag.to_string()),
        });
    }
    if elapsed >= cfg.episode_timeout {
        return Some(StopReason::new(
            StopKind::Timeout,
            format!(
                "episode limit of {}s reached",
                cfg.episode_timeout.as_secs()
            ),
        ));
    }
    if state.step_count >= cfg.max_steps {
        return Some(StopReason::new(
            StopKind::BudgetExhausted,
            format!("step cap of {} reached", cfg.max_steps),
        ));
    }
    None
}
