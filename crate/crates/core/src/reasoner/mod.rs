//! The reasoning boundary: something that proposes weighted tool calls.
//!
//! Implementations only emit candidates. Nothing here touches the sandbox;
//! every proposal goes through projection and the gateway.

pub mod docpack;
pub mod remote;
pub mod scripted;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::agent::{HistoryEntry, Task};
use crate::protocol::projection::{ActionDistribution, WeightedCall};
use crate::protocol::schema::{CallId, ToolCall, ToolSchema};
use crate::protocol::validate::Rejection;

pub use docpack::{load_doc_pack, Condition, DocPack, DocPackError, DocPackRef};
pub use remote::{RemoteConfig, RemoteReasoner};
pub use scripted::{Script, ScriptStep, ScriptedReasoner};

/// Everything a reasoner sees at one decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerRequest {
    pub objective: String,
    pub step: u64,
    pub catalog: Vec<ToolSchema>,
    /// Most recent history entries that fit the context budget.
    pub history: Vec<HistoryEntry>,
    pub queue: Vec<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_pack: Option<DocPackRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_rejection: Option<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub tool_name: String,
    #[serde(default)]
    pub arguments: Map<String, Value>,
    /// Missing weights become `1 / rank` (rank starting at 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    /// The active task is finished once this step's action returns a result.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub task_done: bool,
    /// Endpoint-reported details (model name, defaults), traced when present.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub meta: Value,
}

impl CandidateSet {
    pub fn new(candidates: Vec<Candidate>) -> Self {
        Self {
            candidates,
            rationale: None,
            task_done: false,
            meta: Value::Null,
        }
    }

    /// Weight of the candidate at `index`, applying the rank default.
    pub fn weight_of(&self, index: usize) -> f64 {
        self.candidates[index]
            .weight
            .unwrap_or(1.0 / (index as f64 + 1.0))
    }

    /// Checks the set invariants: nonempty, finite nonnegative weights, some
    /// weight positive.
    pub fn check(&self) -> Result<(), String> {
        if self.candidates.is_empty() {
            return Err("candidate set is empty".into());
        }
        let weights: Vec<f64> = (0..self.candidates.len())
            .map(|i| self.weight_of(i))
            .collect();
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(format!("candidate {i} has invalid weight {w}"));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err("all candidate weights are zero".into());
        }
        Ok(())
    }

    /// Turns the set into unnormalized calls with ids `{prefix}-{i}`.
    pub fn to_distribution(&self, call_id_prefix: &str) -> ActionDistribution {
        let entries = self
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| WeightedCall {
                call: ToolCall {
                    call_id: CallId::new(format!("{call_id_prefix}-{i}")),
                    tool_name: c.tool_name.clone(),
                    arguments: c.arguments.clone(),
                },
                weight: self.weight_of(i),
            })
            .collect();
        ActionDistribution::from_candidates(entries)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReasonerError {
    /// Transport failure or an unusable reply. `digest` identifies the raw
    /// reply when there was one.
    #[error("reasoner failure: {reason}")]
    Failure {
        reason: String,
        digest: Option<String>,
    },
    #[error("reasoner endpoint rate-limited the request {attempts} times")]
    RateLimited { attempts: u32 },
    #[error("script has no step {step}")]
    ScriptExhausted { step: usize },
    #[error("script step {step} expected {field} = {expected}, request has {found}")]
    ScriptDesync {
        step: usize,
        field: String,
        expected: String,
        found: String,
    },
}

impl ReasonerError {
    pub fn digest(&self) -> Option<&str> {
        match self {
            ReasonerError::Failure { digest, .. } => digest.as_deref(),
            _ => None,
        }
    }
}

pub trait Reasoner: Send {
    /// Decomposes the objective into task descriptions. An empty list means
    /// the reasoner has nothing left to try.
    fn plan(&mut self, request: &ReasonerRequest) -> Result<Vec<String>, ReasonerError>;

    fn next_candidates(&mut self, request: &ReasonerRequest)
        -> Result<CandidateSet, ReasonerError>;

    /// Opaque resumable position, stored in checkpoints.
    fn snapshot(&self) -> Value {
        Value::Null
    }

    fn restore(&mut self, _snapshot: &Value) -> Result<(), ReasonerError> {
        Ok(())
    }
}

impl<R: Reasoner + ?Sized> Reasoner for Box<R> {
    fn plan(&mut self, request: &ReasonerRequest) -> Result<Vec<String>, ReasonerError> {
        (**self).plan(request)
    }

    fn next_candidates(
        &mut self,
        request: &ReasonerRequest,
    ) -> Result<CandidateSet, ReasonerError> {
        (**self).next_candidates(request)
    }

    fn snapshot(&self) -> Value {
        (**self).snapshot()
    }

    fn restore(&mut self, snapshot: &Value) -> Result<(), ReasonerError> {
        (**self).restore(snapshot)
    }
}
