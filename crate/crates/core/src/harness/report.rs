//! Per-condition summary, global tests and the report files.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::TRIALS_FILE;
use super::stats::{
    chi_square_independence, cohens_d, kruskal_wallis, wilson_interval, TestResult,
};
use super::trial::TrialResult;
use crate::reasoner::Condition;

/// Two-sided 95% critical value.
pub const WILSON_Z: f64 = 1.96;

pub const CONDITIONS_CSV: &str = "conditions.csv";
pub const TRIALS_CSV: &str = "trials.csv";
pub const PLOT_CSV: &str = "success_plot.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: Condition,
    pub successes: u64,
    /// Valid trials only.
    pub trials: u64,
    pub invalid: u64,
    /// `None` when the cell has no valid trials.
    pub rate: Option<f64>,
    pub wilson: Option<(f64, f64)>,
    /// Mean over successful trials.
    pub mean_duration_min: Option<f64>,
}

impl ConditionRow {
    pub fn from_counts(
        condition: Condition,
        successes: u64,
        trials: u64,
        mean_duration_min: Option<f64>,
    ) -> Self {
        assert!(successes <= trials, "successes exceed trials");
        Self {
            condition,
            successes,
            trials,
            invalid: 0,
            rate: (trials > 0).then(|| successes as f64 / trials as f64),
            wilson: wilson_interval(successes, trials, WILSON_Z).ok(),
            mean_duration_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseEffect {
    pub a: Condition,
    pub b: Condition,
    pub d: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<ConditionRow>,
    /// Success/failure counts across conditions.
    pub chi_square: Option<TestResult>,
    /// Durations of successful trials across conditions.
    pub kruskal_wallis: Option<TestResult>,
    pub cohens_d: Vec<PairwiseEffect>,
    /// Trials excluded as invalid, by name.
    pub holes: Vec<String>,
    /// Why a test was not computed.
    pub notes: Vec<String>,
}

impl SummaryTable {
    /// Summary from counts alone; duration tests are left out.
    pub fn from_rows(rows: Vec<ConditionRow>) -> Self {
        let mut notes = Vec::new();
        let chi_square = chi_square_of(&rows, &mut notes);
        Self {
            rows,
            chi_square,
            kruskal_wallis: None,
            cohens_d: Vec::new(),
            holes: Vec::new(),
            notes,
        }
    }

    pub fn from_results(results: &[TrialResult], conditions: &[Condition]) -> Self {
        let mut rows = Vec::new();
        let mut durations = Vec::new();
        for &c in conditions {
            let of_c: Vec<&TrialResult> = results.iter().filter(|r| r.condition == c).collect();
            let valid: Vec<&&TrialResult> = of_c.iter().filter(|r| r.valid).collect();
            let solved: Vec<f64> = valid
                .iter()
                .filter(|r| r.success == 1)
                .map(|r| r.duration_min)
                .collect();
            let mean =
                (!solved.is_empty()).then(|| solved.iter().sum::<f64>() / solved.len() as f64);
            let mut row =
                ConditionRow::from_counts(c, solved.len() as u64, valid.len() as u64, mean);
            row.invalid = (of_c.len() - valid.len()) as u64;
            rows.push(row);
            durations.push(solved);
        }
        let mut table = Self::from_rows(rows);
        table.holes = results
            .iter()
            .filter(|r| !r.valid)
            .map(|r| super::trial::trial_name(&r.challenge, r.condition, r.trial))
            .collect();

        let groups: Vec<Vec<f64>> = durations
            .iter()
            .filter(|g| !g.is_empty())
            .cloned()
            .collect();
        table.kruskal_wallis = match kruskal_wallis(&groups) {
            Ok(t) => Some(t),
            Err(e) => {
                table.notes.push(format!("kruskal-wallis: {e}"));
                None
            }
        };
        for i in 0..conditions.len() {
            for j in i + 1..conditions.len() {
                table.cohens_d.push(PairwiseEffect {
                    a: conditions[i],
                    b: conditions[j],
                    d: cohens_d(&durations[i], &durations[j]).ok(),
                });
            }
        }
        table
    }
}

fn chi_square_of(rows: &[ConditionRow], notes: &mut Vec<String>) -> Option<TestResult> {
    let table: Vec<Vec<f64>> = rows
        .iter()
        .filter(|r| r.trials > 0)
        .map(|r| vec![r.successes as f64, (r.trials - r.successes) as f64])
        .collect();
    match chi_square_independence(&table) {
        Ok(t) => Some(t),
        Err(e) => {
            notes.push(format!("chi-square: {e}"));
            None
        }
    }
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_default()
}

/// Writes the condition table, per-trial rows, plot data and a JSON summary.
pub fn emit_report(
    summary: &SummaryTable,
    trials: &[TrialResult],
    out: &Path,
) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let paths: Vec<PathBuf> = [CONDITIONS_CSV, TRIALS_CSV, PLOT_CSV, SUMMARY_JSON]
        .iter()
        .map(|f| out.join(f))
        .collect();

    let mut w = csv::Writer::from_path(&paths[0])?;
    w.write_record([
        "condition",
        "successes",
        "trials",
        "invalid",
        "rate_pct",
        "wilson_lo",
        "wilson_hi",
        "mean_duration_min",
    ])?;
    for r in &summary.rows {
        w.write_record([
            r.condition.label().to_string(),
            r.successes.to_string(),
            r.trials.to_string(),
            r.invalid.to_string(),
            opt(r.rate.map(|x| x * 100.0), 1),
            opt(r.wilson.map(|w| w.0), 4),
            opt(r.wilson.map(|w| w.1), 4),
            opt(r.mean_duration_min, 1),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths[1])?;
    w.write_record([
        "challenge",
        "category",
        "condition",
        "trial",
        "seed",
        "valid",
        "success",
        "duration_min",
        "stop",
        "trace",
    ])?;
    for t in trials {
        w.write_record([
            t.challenge.clone(),
            serde_json::to_value(t.category)
                .expect("category")
                .as_str()
                .unwrap_or_default()
                .to_string(),
            t.condition.label().to_string(),
            t.trial.to_string(),
            t.seed.to_string(),
            t.valid.to_string(),
            t.success.to_string(),
            format!("{:.4}", t.duration_min),
            t.stop.clone(),
            t.trace.display().to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths[2])?;
    w.write_record(["condition", "rate", "lo", "hi"])?;
    for r in summary.rows.iter().filter(|r| r.trials > 0) {
        w.write_record([
            r.condition.label().to_string(),
            opt(r.rate, 6),
            opt(r.wilson.map(|w| w.0), 6),
            opt(r.wilson.map(|w| w.1), 6),
        ])?;
    }
    w.flush()?;

    let json = serde_json::to_string_pretty(summary).map_err(io::Error::other)?;
    std::fs::write(&paths[3], json + "\n")?;
    Ok(paths)
}

/// Trial results persisted under `dir` by a matrix run. A torn final line
/// from an interrupted run is skipped.
pub fn load_trials(dir: &Path) -> io::Result<Vec<TrialResult>> {
    let text = std::fs::read_to_string(dir.join(TRIALS_FILE))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => {
                log::warn!("skipping torn last line")
            }
            Err(e) => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("line {}: {e}", i + 1),
                ))
            }
        }
    }
    Ok(out)
}

/// Conditions present in `trials`, richest first.
pub fn conditions_of(trials: &[TrialResult]) -> Vec<Condition> {
    Condition::ALL
        .into_iter()
        .filter(|c| trials.iter().any(|t| t.condition == *c))
        .collect()
}
