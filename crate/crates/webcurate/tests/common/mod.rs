#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use axum::Router;
use webcurate::pipeline::Sample;
use webcurate_core::ingest::ingest_dir;
use webcurate_core::manifest::write_jsonl;
use webcurate_render::{find_browser, RenderConfig};

/// Serves `app` on an ephemeral port from a background runtime that lives
/// for the rest of the test process.
pub fn spawn_app(app: Router) -> String {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(l.local_addr().unwrap()).unwrap();
            axum::serve(l, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

pub fn browser_available() -> bool {
    let ok = find_browser(&RenderConfig::default()).is_ok();
    if !ok {
        eprintln!("no browser found; skipping");
    }
    ok
}

pub fn fixture_pages() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pages")
}

/// The first `n` fixture pages in file order, as a raw manifest at `out`.
pub fn raw_manifest(n: usize, out: &Path) -> Vec<Sample> {
    let mut pages = ingest_dir(&fixture_pages()).unwrap().pages;
    pages.sort_by(|a, b| a.url.cmp(&b.url));
    pages.truncate(n);
    write_jsonl(out, &pages).unwrap();
    pages.into_iter().map(Sample::from).collect()
}

pub fn png(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
    let img = image::RgbImage::from_pixel(w, h, image::Rgb(rgb));
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}
