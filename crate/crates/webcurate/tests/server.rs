mod common;

use std::path::Path;
use std::sync::Arc;
use std::thread;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use webcurate::server::{self, AppState};
use webcurate_core::quality::AnnotationStore;

fn store_with(dir: &Path, ids: &[&str]) -> AnnotationStore {
    let store = AnnotationStore::open(&dir.join("store.jsonl")).unwrap();
    for id in ids {
        let shot = dir.join(format!("{id}.png"));
        std::fs::write(&shot, common::png(4, 4, [10, 20, 30])).unwrap();
        store.add_sample(id, Some(shot)).unwrap();
    }
    store
}

fn start(store: AnnotationStore, base: &Path) -> String {
    let state = Arc::new(AppState {
        store,
        base: base.to_path_buf(),
    });
    common::spawn_app(server::router(state, None))
}

fn annotate(c: &Client, base: &str, sample: &str, who: &str, criteria: Value) -> reqwest::blocking::Response {
    c.post(format!("{base}/annotations"))
        .json(&json!({"sample_id": sample, "annotator_id": who, "criteria": criteria}))
        .send()
        .unwrap()
}

#[test]
fn task_loop_walks_every_sample_then_reports_empty() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(store_with(dir.path(), &["a", "b"]), dir.path());
    let c = Client::new();
    let mut seen = Vec::new();
    loop {
        let r = c
            .get(format!("{base}/tasks/next?annotator=ann1&group=1"))
            .send()
            .unwrap();
        if r.status() == StatusCode::NO_CONTENT {
            break;
        }
        assert_eq!(r.status(), StatusCode::OK);
        let t: Value = r.json().unwrap();
        assert_eq!(t["group_id"], 1);
        let id = t["sample_id"].as_str().unwrap().to_string();
        let shot = c
            .get(format!("{base}{}", t["screenshot_url"].as_str().unwrap()))
            .send()
            .unwrap();
        assert_eq!(shot.headers()["content-type"], "image/png");
        let a = annotate(&c, &base, &id, "ann1", json!([true, true, false, false, false]));
        assert_eq!(a.status(), StatusCode::OK);
        assert_eq!(a.json::<Value>().unwrap()["score"], 2);
        seen.push(id);
    }
    assert_eq!(seen, ["a", "b"]);
}

#[test]
fn resubmission_upserts_and_score_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(store_with(dir.path(), &["a"]), dir.path());
    let c = Client::new();
    annotate(&c, &base, "a", "ann", json!([true, false, false, false, false]));
    let body = json!({
        "sample_id": "a",
        "annotator_id": "ann",
        "score": 5,
        "criteria": {"layout_normal": true, "styling_normal": true, "no_excess_blank": true,
                     "rich_color": false, "aesthetic": false}
    });
    let a: Value = c
        .post(format!("{base}/annotations"))
        .json(&body)
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(a["score"], 3);
    let report: Value = c
        .get(format!("{base}/reports/consistency"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let hist = report["annotators"]["ann"]["histogram"].as_array().unwrap();
    assert_eq!(hist.iter().map(|v| v.as_u64().unwrap()).sum::<u64>(), 1);
    assert_eq!(hist[3], 1);
}

#[test]
fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let store = store_with(dir.path(), &["a"]);
    store.add_sample("noshot", None).unwrap();
    let base = start(store, dir.path());
    let c = Client::new();
    let status = |r: reqwest::blocking::Response| r.status();
    assert_eq!(
        status(c.get(format!("{base}/tasks/next")).send().unwrap()),
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        status(annotate(&c, &base, "zzz", "ann", json!([true, true, true, true, true]))),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        status(
            c.post(format!("{base}/annotations"))
                .json(&json!({"sample_id": "a"}))
                .send()
                .unwrap()
        ),
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        status(c.get(format!("{base}/samples/zzz/screenshot")).send().unwrap()),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        status(c.get(format!("{base}/samples/noshot/screenshot")).send().unwrap()),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        status(c.get(format!("{base}/no/such/route")).send().unwrap()),
        StatusCode::NOT_FOUND
    );
}

#[test]
fn concurrent_annotators_on_distinct_samples_both_persist() {
    let dir = tempfile::tempdir().unwrap();
    let ids: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let base = start(store_with(dir.path(), &refs), dir.path());
    let handles: Vec<_> = ["left", "right"]
        .into_iter()
        .enumerate()
        .map(|(k, who)| {
            let base = base.clone();
            let mine: Vec<String> = ids.iter().skip(k).step_by(2).cloned().collect();
            thread::spawn(move || {
                let c = Client::new();
                for id in mine {
                    assert!(annotate(&c, &base, &id, who, json!([true, false, true, false, true]))
                        .status()
                        .is_success());
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let reopened = AnnotationStore::open(&dir.path().join("store.jsonl")).unwrap();
    assert_eq!(reopened.len(), 20);
    assert_eq!(
        reopened
            .annotations()
            .iter()
            .filter(|a| a.annotator_id == "left")
            .count(),
        10
    );
}

#[test]
fn graceful_shutdown_flushes_and_restart_preserves_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    drop(store_with(dir.path(), &["a"]));
    let rt = tokio::runtime::Runtime::new().unwrap();
    for round in 0..2 {
        let store = AnnotationStore::open(&path).unwrap();
        assert_eq!(store.len(), round);
        let state = Arc::new(AppState {
            store,
            base: dir.path().to_path_buf(),
        });
        let listener = rt.block_on(server::bind("127.0.0.1:0".parse().unwrap())).unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let task = rt.spawn(server::serve(listener, state, None, async {
            let _ = rx.await;
        }));
        if round == 0 {
            let c = Client::new();
            let r = annotate(
                &c,
                &format!("http://{addr}"),
                "a",
                "ann",
                json!([true, true, true, true, false]),
            );
            assert!(r.status().is_success());
        }
        tx.send(()).unwrap();
        rt.block_on(task).unwrap().unwrap();
    }
}

#[test]
fn port_in_use_is_a_startup_error() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let first = rt.block_on(server::bind("127.0.0.1:0".parse().unwrap())).unwrap();
    let addr = first.local_addr().unwrap();
    let err = rt.block_on(server::bind(addr)).unwrap_err();
    assert!(err.to_string().contains("cannot listen"), "{err}");
}

#[test]
fn ui_assets_are_served_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir(&ui).unwrap();
    std::fs::write(ui.join("index.html"), "<h1>ui</h1>").unwrap();
    let state = Arc::new(AppState {
        store: AnnotationStore::in_memory(),
        base: dir.path().to_path_buf(),
    });
    let base = common::spawn_app(server::router(state, Some(ui)));
    let c = Client::new();
    assert_eq!(
        c.get(format!("{base}/index.html")).send().unwrap().text().unwrap(),
        "<h1>ui</h1>"
    );
    assert_eq!(
        c.get(format!("{base}/missing.js")).send().unwrap().status(),
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        c.get(format!("{base}/reports/consistency")).send().unwrap().status(),
        StatusCode::OK
    );
}
