use std::fs;

use webcurate_core::quality::{AnnotationInput, AnnotationStore, Criteria, Rounding, TrainingLabel};

fn input(sample: &str, who: &str, crit: [bool; 5]) -> AnnotationInput {
    AnnotationInput {
        sample_id: sample.into(),
        annotator_id: who.into(),
        criteria: Criteria::from_array(crit),
        score: None,
    }
}

#[test]
fn export_skips_samples_without_screenshots() {
    let dir = tempfile::tempdir().unwrap();
    let shots = dir.path().join("shots");
    fs::create_dir_all(&shots).unwrap();
    for id in ["s1", "s2"] {
        fs::write(shots.join(format!("{id}.png")), id.as_bytes()).unwrap();
    }
    let store = AnnotationStore::open(&dir.path().join("store.jsonl")).unwrap();
    store.add_sample("s1", Some(shots.join("s1.png"))).unwrap();
    store.add_sample("s2", Some(shots.join("s2.png"))).unwrap();
    store.add_sample("s3", None).unwrap();
    store.register_annotator("ann", Some(0)).unwrap();
    for s in ["s1", "s2", "s3"] {
        store
            .record_annotation(input(s, "ann", [true, true, true, false, false]), 0)
            .unwrap();
    }

    let out = dir.path().join("export");
    let report = store.export_training_set(&out, Rounding::None).unwrap();
    assert_eq!((report.exported, report.skipped_missing_screenshot), (2, 1));
    let labels: Vec<TrainingLabel> = webcurate_core::manifest::read_jsonl(&out.join("labels.jsonl")).unwrap();
    assert_eq!(labels.len(), 2);
    assert_eq!(labels[0].score, 3.0);
    assert!(out.join("images/s2.png").exists());
}

#[test]
fn store_survives_reopen_and_upserts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    {
        let store = AnnotationStore::open(&path).unwrap();
        store.add_sample("x", None).unwrap();
        store.register_annotator("a", None).unwrap();
        store.record_annotation(input("x", "a", [true; 5]), 1).unwrap();
        store
            .record_annotation(input("x", "a", [true, true, false, false, false]), 2)
            .unwrap();
        assert_eq!(store.len(), 1);
        store.flush().unwrap();
    }
    let store = AnnotationStore::open(&path).unwrap();
    assert_eq!(store.len(), 1);
    assert_eq!(store.human_score("x"), Some(2.0));
    assert_eq!(store.next_task("a").unwrap(), None);
}
