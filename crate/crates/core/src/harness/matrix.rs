//! The challenge × condition × trial matrix.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use super::manifest::ChallengeManifest;
use super::report::SummaryTable;
use super::trial::{run_trial, TrialConfig, TrialResult};
use crate::reasoner::Condition;

pub const TRIALS_FILE: &str = "trials.jsonl";

#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub trials: u32,
    /// Cell `i` (in challenge, condition, trial order) gets `base_seed + i`.
    pub base_seed: u64,
    pub workers: usize,
    pub trial: TrialConfig,
    /// Each result is appended here as one JSON line when it finishes.
    pub results_path: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum MatrixError {
    #[error("matrix needs at least one challenge, condition and trial")]
    Empty,
    #[error("cannot persist trial results: {0}")]
    Persist(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct MatrixRun {
    pub results: Vec<TrialResult>,
    pub summary: SummaryTable,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    challenge: usize,
    condition: Condition,
    trial: u32,
    seed: u64,
}

fn cells(n_challenges: usize, conditions: &[Condition], trials: u32, base_seed: u64) -> Vec<Cell> {
    let mut out = Vec::new();
    for challenge in 0..n_challenges {
        for &condition in conditions {
            for trial in 0..trials {
                let seed = base_seed.wrapping_add(out.len() as u64);
                out.push(Cell {
                    challenge,
                    condition,
                    trial,
                    seed,
                });
            }
        }
    }
    out
}

/// Runs every cell on up to `workers` threads. Invalid trials stay in the
/// results and are left out of the summary's counts.
pub fn run_matrix(
    manifests: &[ChallengeManifest],
    conditions: &[Condition],
    cfg: &MatrixConfig,
) -> Result<MatrixRun, MatrixError> {
    if manifests.is_empty() || conditions.is_empty() || cfg.trials == 0 {
        return Err(MatrixError::Empty);
    }
    let cells = cells(manifests.len(), conditions, cfg.trials, cfg.base_seed);
    let sink = match &cfg.results_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(p)?,
            ))
        }
        None => None,
    };
    let slots: Mutex<Vec<Option<TrialResult>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let persist_error: Mutex<Option<std::io::Error>> = Mutex::new(None);
    let workers = cfg.workers.clamp(1, cells.len());

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let m = &manifests[cell.challenge];
                let r = run_trial(m, cell.condition, cell.trial, cell.seed, &cfg.trial);
                log::info!(
                    "{} {} t{}: {} ({})",
                    r.challenge,
                    r.condition,
                    r.trial,
                    r.stop,
                    if r.valid { "valid" } else { "invalid" }
                );
                if let Some(sink) = &sink {
                    let line = serde_json::to_string(&r).expect("trial result serializes");
                    let mut f = sink.lock().expect("sink lock");
                    if let Err(e) = writeln!(f, "{line}") {
                        persist_error.lock().expect("error lock").get_or_insert(e);
                    }
                }
                slots.lock().expect("slot lock")[i] = Some(r);
            });
        }
    });

    if let Some(e) = persist_error.into_inner().expect("error lock") {
        return Err(MatrixError::Persist(e));
    }
    let results: Vec<TrialResult> = slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect();
    let summary = SummaryTable::from_results(&results, conditions);
    Ok(MatrixRun { results, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_count_and_seeds() {
        let c = cells(2, &Condition::ALL, 3, 100);
        assert_eq!(c.len(), 24);
        assert_eq!(c[0].seed, 100);
        assert_eq!(c[23].seed, 123);
        assert_eq!((c[3].condition, c[3].trial), (Condition::Templates, 0));
        assert_eq!(c[12].challenge, 1);
    }
}
