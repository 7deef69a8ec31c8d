//! Renormalizes a reasoner's weighted candidates onto the valid subset.
//!
//! Each retained weight becomes `w / Z`, where `Z` is the summed weight of
//! the valid candidates. Invalid candidates are dropped. `Z == 0` is an
//! error rather than a fallback, so an unvalidated action can never be
//! selected.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::schema::{ToolCall, ToolSchema};
use super::validate::validate_with;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCall {
    pub call: ToolCall,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub entries: Vec<WeightedCall>,
    /// Sum of the weights the entries were divided by (1 for raw input).
    pub normalizer: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ProjectionError {
    #[error("candidate set is empty")]
    NoCandidates,
    #[error("candidate {index} has invalid weight {weight}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("all candidate weights are zero")]
    ZeroMass,
    #[error("no candidate satisfies its schema (partition function is zero)")]
    EmptyValidSet,
}

impl ActionDistribution {
    /// Wraps raw, unnormalized candidates.
    pub fn from_candidates(entries: Vec<WeightedCall>) -> Self {
        Self {
            entries,
            normalizer: 1.0,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.weight).sum()
    }

    /// Highest weight; ties go to the lexicographically smallest
    /// `(tool_name, call_id)`.
    pub fn argmax(&self) -> Option<&WeightedCall> {
        self.entries.iter().min_by(|a, b| rank_order(a, b))
    }

    /// Entries sorted by the same order `argmax` uses.
    pub fn ranked(&self) -> Vec<&WeightedCall> {
        let mut v: Vec<&WeightedCall> = self.entries.iter().collect();
        v.sort_by(|a, b| rank_order(a, b));
        v
    }

    fn check_preconditions(&self) -> Result<(), ProjectionError> {
        if self.entries.is_empty() {
            return Err(ProjectionError::NoCandidates);
        }
        for (index, e) in self.entries.iter().enumerate() {
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(ProjectionError::InvalidWeight {
                    index,
                    weight: e.weight,
                });
            }
        }
        if self.entries.iter().all(|e| e.weight == 0.0) {
            return Err(ProjectionError::ZeroMass);
        }
        Ok(())
    }
}

/// Descending weight, then ascending `(tool_name, call_id)`.
fn rank_order(a: &WeightedCall, b: &WeightedCall) -> Ordering {
    b.weight
        .partial_cmp(&a.weight)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.call.tool_name.cmp(&b.call.tool_name))
        .then_with(|| a.call.call_id.cmp(&b.call.call_id))
}

/// Projects onto the candidates whose schema validation passes.
pub fn project_distribution<'a, F>(
    candidates: &ActionDistribution,
    schema_lookup: F,
) -> Result<ActionDistribution, ProjectionError>
where
    F: Fn(&str) -> Option<&'a ToolSchema>,
{
    project_with(candidates, |call| validate_with(call, &schema_lookup).valid)
}

/// Projection under an arbitrary indicator.
pub fn project_with<F>(
    candidates: &ActionDistribution,
    mut indicator: F,
) -> Result<ActionDistribution, ProjectionError>
where
    F: FnMut(&ToolCall) -> bool,
{
    candidates.check_preconditions()?;
    let kept: Vec<&WeightedCall> = candidates
        .entries
        .iter()
        .filter(|e| indicator(&e.call))
        .collect();
    let z: f64 = kept.iter().map(|e| e.weight).sum();
    if kept.is_empty() || z <= 0.0 {
        return Err(ProjectionError::EmptyValidSet);
    }
    let entries = kept
        .into_iter()
        .map(|e| WeightedCall {
            call: e.call.clone(),
            weight: e.weight / z,
        })
        .collect();
    Ok(ActionDistribution {
        entries,
        normalizer: z,
    })
}
