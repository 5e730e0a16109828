mod common;

use std::fs;
use std::path::Path;

use webcurate::config::PipelineConfig;
use webcurate::pipeline::{run_pipeline, PipelineError, STAGES};

fn mock_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.score.scorer = "mock:4.5".into();
    cfg.safety.nsfw = "mock".into();
    cfg.render.pool = 2;
    cfg
}

fn offline_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.render.enabled = false;
    cfg.score.enabled = false;
    cfg.safety.enabled = false;
    cfg.dedup.enabled = false;
    cfg
}

fn checkpoint_reports(work: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(work.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".report.json"))
        .collect();
    v.sort();
    v
}

#[test]
fn stats_only_is_a_passthrough_with_a_stats_report() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    common::raw_manifest(20, &raw);
    let mut cfg = offline_config();
    cfg.length.enabled = false;
    cfg.cleanse.enabled = false;
    cfg.partition.enabled = false;
    let work = dir.path().join("work");
    let out = run_pipeline(&cfg, &raw, &work).unwrap();
    assert_eq!(out.entries.len(), 20);
    assert!(out.funnel.is_conserved());
    assert_eq!(checkpoint_reports(&work).len(), STAGES.len());
    assert!(out
        .funnel
        .stages
        .iter()
        .filter(|s| s.stage != "stats")
        .all(|s| !s.enabled));
    let csv = fs::read_to_string(work.join("stats.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("all,20,"), "{csv}");
    assert!(!work.join("partition.txt").exists());
}

#[test]
fn changing_a_parameter_only_invalidates_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    common::raw_manifest(12, &raw);
    let work = dir.path().join("work");
    let mut cfg = offline_config();
    cfg.partition.per_split = 3;
    run_pipeline(&cfg, &raw, &work).unwrap();

    let again = run_pipeline(&cfg, &raw, &work).unwrap();
    assert!(again.funnel.stages.iter().all(|s| s.resumed));

    cfg.partition.seed = 99;
    let changed = run_pipeline(&cfg, &raw, &work).unwrap();
    let resumed: Vec<(&str, bool)> = changed
        .funnel
        .stages
        .iter()
        .map(|s| (s.stage.as_str(), s.resumed))
        .collect();
    assert_eq!(
        resumed,
        [
            ("length", true),
            ("cleanse", true),
            ("render", true),
            ("score", true),
            ("safety", true),
            ("dedup", true),
            ("partition", false),
            ("stats", false)
        ]
    );
    // Stale checkpoints of the recomputed stages are replaced, not piled up.
    assert_eq!(checkpoint_reports(&work).len(), STAGES.len());
}

#[test]
fn configuration_errors_abort_before_any_stage_runs() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    common::raw_manifest(3, &raw);
    let work = dir.path().join("work");

    let mut cfg = offline_config();
    cfg.partition.reject_list = Some(dir.path().join("missing.txt"));
    assert!(matches!(run_pipeline(&cfg, &raw, &work), Err(PipelineError::Config(_))));

    let mut cfg = mock_config();
    cfg.score.scorer = "carrier-pigeon".into();
    assert!(matches!(run_pipeline(&cfg, &raw, &work), Err(PipelineError::Config(_))));

    let mut cfg = mock_config();
    cfg.safety.badwords = vec![dir.path().join("nope.txt")];
    assert!(matches!(run_pipeline(&cfg, &raw, &work), Err(PipelineError::Config(_))));
    assert!(!work.exists());

    let missing = dir.path().join("absent.jsonl");
    assert!(matches!(
        run_pipeline(&offline_config(), &missing, &work),
        Err(PipelineError::Input(_))
    ));
}

#[test]
fn fixture_run_writes_eight_checkpoints_and_is_reproducible() {
    if !common::browser_available() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    common::raw_manifest(20, &raw);
    let cfg = mock_config();

    let a = run_pipeline(&cfg, &raw, &dir.path().join("a")).unwrap();
    assert_eq!(checkpoint_reports(&dir.path().join("a")).len(), 8);
    assert!(a.funnel.is_conserved(), "{}", a.funnel.to_text());
    assert!(!a.entries.is_empty());
    assert!(a
        .entries
        .iter()
        .all(|e| dir.path().join("a").join(&e.screenshot_ref).is_file()));

    let b = run_pipeline(&cfg, &raw, &dir.path().join("b")).unwrap();
    assert_eq!(fs::read(&a.dataset).unwrap(), fs::read(&b.dataset).unwrap());
}

#[test]
fn resume_after_interrupted_render_gives_the_same_dataset() {
    if !common::browser_available() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    common::raw_manifest(12, &raw);
    let work = dir.path().join("work");
    let cfg = mock_config();
    let first = run_pipeline(&cfg, &raw, &work).unwrap();
    let expected = fs::read(&first.dataset).unwrap();

    // Simulate a kill partway through rendering: the journal holds only some
    // pages (plus a torn line) and no stage from render on has finished.
    let ckpt = work.join("checkpoints");
    for e in fs::read_dir(&ckpt).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        let n: u32 = name[..2].parse().unwrap();
        if n >= 3 {
            fs::remove_file(e.path()).unwrap();
        }
    }
    fs::remove_file(&first.dataset).unwrap();
    let render_dir = fs::read_dir(work.join("artifacts"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let journal = render_dir.join("journal.jsonl");
    let text = fs::read_to_string(&journal).unwrap();
    let mut kept: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    kept.push_str(&text.lines().nth(5).unwrap()[..20]);
    fs::write(&journal, kept).unwrap();

    let second = run_pipeline(&cfg, &raw, &work).unwrap();
    let render = second.funnel.stages.iter().find(|s| s.stage == "render").unwrap();
    assert!(!render.resumed);
    assert_eq!(fs::read(&second.dataset).unwrap(), expected);
}

#[test]
fn unreachable_scorer_parks_samples_and_the_funnel_still_balances() {
    if !common::browser_available() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    common::raw_manifest(4, &raw);
    let mut cfg = mock_config();
    cfg.score.scorer = "http://127.0.0.1:1/score".into();
    cfg.services.retry.attempts = 1;
    cfg.services.timeout_ms = 1000;
    let work = dir.path().join("work");
    let out = run_pipeline(&cfg, &raw, &work).unwrap();
    assert_eq!(out.funnel.parked, 4);
    assert_eq!(out.entries.len(), 0);
    assert!(out.funnel.is_conserved());
    let parked = fs::read_to_string(work.join("parked.jsonl")).unwrap();
    assert_eq!(parked.lines().count(), 4);
    assert!(parked.contains("scorer"));
}
