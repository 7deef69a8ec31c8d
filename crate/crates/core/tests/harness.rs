use std::path::{Path, PathBuf};
use std::time::Duration;

use ctfgate_core::gateway::trace::normalized_lines;
use ctfgate_core::harness::{
    load_suite, run_matrix, run_trial, MatrixConfig, ReasonerSpec, TrialConfig,
};
use ctfgate_core::reasoner::Condition;

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets")
}

fn trial_cfg(root: &Path, reasoner: ReasonerSpec) -> TrialConfig {
    TrialConfig {
        sandbox_root: root.join("sandboxes"),
        trace_dir: root.join("traces"),
        docpack_root: assets().join("docpacks"),
        launcher: vec![env!("CARGO_BIN_EXE_ctfgate-tool").to_string()],
        timeout: Duration::from_secs(60),
        max_steps: 20,
        reasoner,
        servers: None,
    }
}

#[test]
fn toy_suite_solves_and_replays() {
    let suite = load_suite(&assets().join("suite")).unwrap();
    assert_eq!(suite.len(), 5);
    let sandboxes = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let mut trial = trial_cfg(out.path(), ReasonerSpec::Scripted);
        trial.sandbox_root = sandboxes.path().to_path_buf();
        let cfg = MatrixConfig {
            trials: 1,
            base_seed: 7,
            workers: 5,
            trial,
            results_path: Some(out.path().join("trials.jsonl")),
        };
        let run = run_matrix(&suite, &[Condition::Baseline], &cfg).unwrap();
        for r in &run.results {
            assert!(r.valid && r.success == 1, "{r:?}");
            assert!(r.duration_min < 1.0);
        }
        runs.push((out, run));
    }
    for (a, b) in runs[0].1.results.iter().zip(&runs[1].1.results) {
        assert_eq!(
            normalized_lines(&a.trace).unwrap(),
            normalized_lines(&b.trace).unwrap(),
            "{}",
            a.challenge
        );
    }
}

#[test]
fn failing_setup_is_invalid_not_failed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("challenge.toml"),
        "id = \"broken\"\ncategory = \"Cryptography\"\nartifact = \"x\"\npoints = 1\nsetup = [[\"false\"]]\nscript = \"s.json\"\n",
    )
    .unwrap();
    let m = ctfgate_core::harness::ChallengeManifest::load(dir.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = run_trial(
        &m,
        Condition::Minimal,
        0,
        1,
        &trial_cfg(out.path(), ReasonerSpec::Scripted),
    );
    assert!(!r.valid);
    assert_eq!(r.success, 0);
    assert_eq!(r.stop, "invalid");
    assert!(
        !out.path().join("sandboxes/broken-minimal-t0").exists(),
        "teardown removes the sandbox"
    );
}
