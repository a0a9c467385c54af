//! Reduced-scale end-to-end pipeline run: every stage executes, artifacts
//! verify, and the tautology methods land on their exact scores.

use saeval_cli::config::RunConfig;
use saeval_cli::stages::{load_filter_outcomes, run_full_pipeline};

pub fn smoke_config(seed: u64) -> RunConfig {
    let mut config = RunConfig::default_induction(seed);
    config.training.examples = 3584;
    config.training.epochs = 16;
    config.training.heldout_prompts = 100;
    config.sae.sequence_count = 240;
    config.sae.epochs = 2;
    config.attribution.pair_count = 40;
    config.attribution.top_n = 16;
    config.attribution.filter_prompt_count = 30;
    config.attribution.means_prompt_count = 300;
    config.dictionary.prompt_count = 1200;
    config.evaluation.prompt_count = 50;
    config.evaluation.pair_count = 50;
    config
}

#[test]
fn full_pipeline_runs_and_tautologies_hold() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(11);
    run_full_pipeline(dir.path(), &config).unwrap();

    // Every stage left its manifest and headline artifact behind.
    for stage in ["model", "task", "sae", "discover", "dict", "test1", "test2", "report"] {
        assert!(
            dir.path().join(stage).join("manifest.json").exists(),
            "missing manifest for {stage}"
        );
    }
    let outcomes = load_filter_outcomes(dir.path(), &config).unwrap();
    assert!(!outcomes.is_empty(), "discovery produced no groups");
    assert!(outcomes.iter().any(|o| o.retained), "no group survived filtering");

    let csv = std::fs::read_to_string(dir.path().join("report/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "group,attribute,sign,method,metric,budget,value");
    let body: Vec<&str> = lines.collect();
    assert!(!body.is_empty());

    // Tautologies on every retained group: identity scores exactly one on
    // both metrics, the mean baseline scores exactly zero sufficiency.
    let mut identity_rows = 0;
    let mut mean_rows = 0;
    for line in &body {
        let cols: Vec<&str> = line.split(',').collect();
        let (method, metric, value) = (cols[3], cols[4], cols[6]);
        if method == "identity" && (metric == "sufficiency" || metric == "necessity") {
            assert_eq!(value, "1", "identity {metric} must print exactly 1: {line}");
            identity_rows += 1;
        }
        if method == "mean" && metric == "sufficiency" {
            assert_eq!(value, "0", "mean sufficiency must print exactly 0: {line}");
            mean_rows += 1;
        }
        if method == "ground-truth" && metric == "edit_success" {
            assert_eq!(value, "1", "ground-truth edits must always succeed: {line}");
        }
    }
    assert!(identity_rows > 0 && mean_rows > 0);
}

#[test]
fn stage_rejects_tampered_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = smoke_config(12);
    // Run the first two stages, then corrupt the task document.
    saeval_cli::stages::run_stage(dir.path(), &config, "model").unwrap();
    saeval_cli::stages::run_stage(dir.path(), &config, "task").unwrap();
    let task_path = dir.path().join("task/task.json");
    let mut text = std::fs::read_to_string(&task_path).unwrap();
    text.push('\n');
    std::fs::write(&task_path, text).unwrap();
    let err = saeval_cli::stages::run_stage(dir.path(), &config, "sae").unwrap_err();
    assert!(err.message.contains("hash mismatch"), "unexpected error: {err}");
    assert_eq!(err.artifact.as_deref(), Some("task/task.json"));
}
