//! Benchmark harness: challenge manifests, trials, the condition matrix and
//! its statistics.

pub mod manifest;
pub mod matrix;
pub mod report;
pub mod stats;
pub mod trial;

pub use manifest::{
    load_suite, ChallengeManifest, ManifestError, PolicySpec, ServiceSpec, MANIFEST_FILE,
    SANDBOX_PLACEHOLDER,
};
pub use matrix::{run_matrix, MatrixConfig, MatrixError, MatrixRun, TRIALS_FILE};
pub use report::{
    conditions_of, emit_report, load_trials, ConditionRow, PairwiseEffect, SummaryTable, WILSON_Z,
};
pub use stats::{
    chi_square_independence, cohens_d, kruskal_wallis, wilson_interval, DomainError, TestResult,
};
pub use trial::{check_reward, run_trial, trial_name, ReasonerSpec, TrialConfig, TrialResult};
