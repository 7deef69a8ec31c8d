//! Replays a recorded scenario. Each step answers exactly one `plan` or
//! `next_candidates` call, optionally after checking the request.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CandidateSet, Reasoner, ReasonerError, ReasonerRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub steps: Vec<ScriptStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(default, skip_serializing_if = "Guards::is_empty")]
    pub expect: Guards,
    #[serde(flatten)]
    pub action: StepAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Plan(Vec<String>),
    Propose(CandidateSet),
}

impl StepAction {
    fn kind(&self) -> &'static str {
        match self {
            StepAction::Plan(_) => "plan",
            StepAction::Propose(_) => "propose",
        }
    }
}

/// Conditions the request must meet for the step to apply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guards {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    /// Whether rejection feedback must be present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_len: Option<usize>,
    /// Substring of the latest observation's salient fields, as JSON text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub salient_contains: Option<String>,
    /// Substring of the latest observation's raw text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_contains: Option<String>,
}

impl Guards {
    pub fn is_empty(&self) -> bool {
        *self == Guards::default()
    }

    fn check(&self, step: usize, req: &ReasonerRequest) -> Result<(), ReasonerError> {
        let desync = |field: &str, expected: String, found: String| ReasonerError::ScriptDesync {
            step,
            field: field.into(),
            expected,
            found,
        };
        if let Some(s) = self.step {
            if s != req.step {
                return Err(desync("step", s.to_string(), req.step.to_string()));
            }
        }
        if let Some(r) = self.rejection {
            if r != req.last_rejection.is_some() {
                return Err(desync(
                    "rejection",
                    r.to_string(),
                    req.last_rejection.is_some().to_string(),
                ));
            }
        }
        if let Some(t) = &self.active_task {
            if Some(t) != req.active_task.as_ref() {
                return Err(desync(
                    "active_task",
                    t.clone(),
                    format!("{:?}", req.active_task),
                ));
            }
        }
        if let Some(n) = self.history_len {
            if n != req.history.len() {
                return Err(desync(
                    "history_len",
                    n.to_string(),
                    req.history.len().to_string(),
                ));
            }
        }
        if let Some(needle) = &self.salient_contains {
            let latest = req
                .history
                .last()
                .map(|e| {
                    serde_json::to_string(&e.observation.salient).expect("salient map serializes")
                })
                .unwrap_or_default();
            if !latest.contains(needle.as_str()) {
                return Err(desync("salient_contains", needle.clone(), latest));
            }
        }
        if let Some(needle) = &self.raw_contains {
            let latest = req
                .history
                .last()
                .and_then(|e| e.observation.raw.clone())
                .unwrap_or_default();
            if !latest.contains(needle.as_str()) {
                return Err(desync("raw_contains", needle.clone(), latest));
            }
        }
        Ok(())
    }
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedReasoner {
    script: Script,
    cursor: usize,
}

impl ScriptedReasoner {
    pub fn new(script: Script) -> Self {
        Self { script, cursor: 0 }
    }

    /// Steps consumed so far.
    pub fn position(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.script.steps.len() - self.cursor
    }

    fn take(&mut self, kind: &str, req: &ReasonerRequest) -> Result<&StepAction, ReasonerError> {
        let index = self.cursor;
        let step = self
            .script
            .steps
            .get(index)
            .ok_or(ReasonerError::ScriptExhausted { step: index })?;
        if step.action.kind() != kind {
            return Err(ReasonerError::ScriptDesync {
                step: index,
                field: "kind".into(),
                expected: step.action.kind().into(),
                found: kind.into(),
            });
        }
        step.expect.check(index, req)?;
        self.cursor += 1;
        Ok(&self.script.steps[index].action)
    }
}

impl Reasoner for ScriptedReasoner {
    fn plan(&mut self, request: &ReasonerRequest) -> Result<Vec<String>, ReasonerError> {
        match self.take("plan", request)? {
            StepAction::Plan(tasks) => Ok(tasks.clone()),
            StepAction::Propose(_) => unreachable!("kind checked"),
        }
    }

    fn next_candidates(
        &mut self,
        request: &ReasonerRequest,
    ) -> Result<CandidateSet, ReasonerError> {
        match self.take("propose", request)? {
            StepAction::Propose(set) => Ok(set.clone()),
            StepAction::Plan(_) => unreachable!("kind checked"),
        }
    }

    fn snapshot(&self) -> Value {
        json!({"cursor": self.cursor})
    }

    fn restore(&mut self, snapshot: &Value) -> Result<(), ReasonerError> {
        let cursor = snapshot
            .get("cursor")
            .and_then(Value::as_u64)
            .filter(|c| *c as usize <= self.script.steps.len())
            .ok_or_else(|| ReasonerError::Failure {
                reason: format!("snapshot {snapshot} does not fit this script"),
                digest: None,
            })?;
        self.cursor = cursor as usize;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::catalog;

    fn request(step: u64) -> ReasonerRequest {
        ReasonerRequest {
            objective: "Find the flag".into(),
            step,
            catalog: catalog(),
            history: vec![],
            queue: vec![],
            active_task: None,
            doc_pack: None,
            last_rejection: None,
        }
    }

    fn script() -> Script {
        Script::from_json(
            r#"{"steps": [
                {"plan": ["look at strings"]},
                {"propose": {"candidates": [{"tool_name": "run_command", "arguments": {"binary": "/usr/bin/strings"}}]}},
                {"expect": {"rejection": true}, "propose": {"candidates": [{"tool_name": "triage"}]}}
            ]}"#,
        )
        .unwrap()
    }

    #[test]
    fn replays_in_order_then_exhausts() {
        let mut r = ScriptedReasoner::new(script());
        assert_eq!(r.plan(&request(0)).unwrap(), vec!["look at strings"]);
        let set = r.next_candidates(&request(1)).unwrap();
        assert_eq!(set.candidates[0].tool_name, "run_command");
        assert!(matches!(
            r.next_candidates(&request(2)),
            Err(ReasonerError::ScriptDesync { step: 2, ref field, .. }) if field == "rejection"
        ));
        assert_eq!(r.position(), 2);
    }

    #[test]
    fn kind_mismatch_is_desync() {
        let mut r = ScriptedReasoner::new(script());
        assert!(matches!(
            r.next_candidates(&request(0)),
            Err(ReasonerError::ScriptDesync { ref field, .. }) if field == "kind"
        ));
    }

    #[test]
    fn exhaustion() {
        let mut r = ScriptedReasoner::new(Script::from_json(r#"{"steps": []}"#).unwrap());
        assert_eq!(
            r.plan(&request(0)),
            Err(ReasonerError::ScriptExhausted { step: 0 })
        );
    }

    #[test]
    fn snapshot_restores_cursor() {
        let mut a = ScriptedReasoner::new(script());
        a.plan(&request(0)).unwrap();
        let mut b = ScriptedReasoner::new(script());
        b.restore(&a.snapshot()).unwrap();
        assert_eq!(
            a.next_candidates(&request(1)),
            b.next_candidates(&request(1))
        );
        assert!(b.restore(&json!({"cursor": 99})).is_err());
    }

    #[test]
    fn unknown_guard_is_refused() {
        assert!(Script::from_json(r#"{"steps": [{"expect": {"bogus": 1}, "plan": []}]}"#).is_err());
    }
}
