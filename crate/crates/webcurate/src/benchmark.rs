//! One-pass benchmark: screenshot in, HTML out, rendered and scored against
//! the reference.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::thread;

use image::RgbImage;
use thiserror::Error;
use webcurate_core::curate::DatasetEntry;
use webcurate_core::eval::{
    evaluate_sample, strip_fences, GenerationRequest, Generator, GeneratorError, MetricReport, PageArtifacts,
    SampleMetrics, GENERATION_PROMPT,
};
use webcurate_core::html::Document;
use webcurate_core::layout::{LayoutNode, RenderArtifact};
use webcurate_core::service::ImageEmbedder;
use webcurate_render::{find_browser, RenderConfig, RenderError, Renderer};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// The generator rejected our credentials or quota. Finished samples are
    /// in the journal and are skipped when the run is repeated.
    #[error("benchmark aborted after {done} samples: {reason}")]
    Aborted { done: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub render: RenderConfig,
    pub workers: usize,
    /// Per-sample results are appended here as they finish.
    pub journal: Option<PathBuf>,
}

/// The reference side of one sample, loaded from disk or rendered on demand.
struct Reference {
    png: Vec<u8>,
    image: RgbImage,
    layout: LayoutNode,
}

fn decode(png: &[u8]) -> Option<RgbImage> {
    image::load_from_memory(png).ok().map(|i| i.to_rgb8())
}

fn load_reference(e: &DatasetEntry, base: &Path) -> Option<Reference> {
    if e.screenshot_ref.as_os_str().is_empty() || e.layout_ref.as_os_str().is_empty() {
        return None;
    }
    let png = fs::read(base.join(&e.screenshot_ref)).ok()?;
    let layout = serde_json::from_slice(&fs::read(base.join(&e.layout_ref)).ok()?).ok()?;
    let image = decode(&png)?;
    Some(Reference { png, image, layout })
}

fn from_artifact(a: RenderArtifact) -> Result<Reference, String> {
    if !a.render_ok {
        return Err(a.failure_reason.unwrap_or_else(|| "render failed".into()));
    }
    let png = a.screenshot.ok_or("no screenshot")?;
    let layout = a.layout.ok_or("no layout")?;
    let image = decode(&png).ok_or("undecodable screenshot")?;
    Ok(Reference { png, image, layout })
}

fn page_size(img: &RgbImage) -> [f64; 2] {
    [img.width() as f64, img.height() as f64]
}

fn read_journal(path: &Path) -> BTreeMap<String, SampleMetrics> {
    let Ok(f) = fs::File::open(path) else {
        return BTreeMap::new();
    };
    BufReader::new(f)
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| serde_json::from_str::<SampleMetrics>(&l).ok())
        .map(|m| (m.id.clone(), m))
        .collect()
}

enum Outcome {
    Done(SampleMetrics),
    Fatal(String),
}

fn evaluate_one(
    e: &DatasetEntry,
    base: &Path,
    generator: &dyn Generator,
    embedder: &dyn ImageEmbedder,
    renderer: &mut Renderer,
) -> Outcome {
    let reference = match load_reference(e, base) {
        Some(r) => r,
        None => match from_artifact(renderer.render(&e.id, &e.html)) {
            Ok(r) => r,
            Err(why) => return Outcome::Done(SampleMetrics::failed(&e.id, format!("reference render: {why}"))),
        },
    };
    let req = GenerationRequest {
        id: &e.id,
        screenshot_png: &reference.png,
        prompt: GENERATION_PROMPT,
        reference_html: &e.html,
    };
    let raw = match generator.generate(&req) {
        Ok(t) => t,
        Err(GeneratorError::Fatal(why)) => return Outcome::Fatal(why),
        Err(err) => return Outcome::Done(SampleMetrics::failed(&e.id, err.to_string())),
    };
    // Standard parser recovery, so malformed output still renders.
    let html = Document::parse(&strip_fences(&raw)).to_html();
    let cand = match from_artifact(renderer.render(&e.id, &html)) {
        Ok(c) => c,
        Err(why) => return Outcome::Done(SampleMetrics::failed(&e.id, format!("candidate render: {why}"))),
    };
    let r = PageArtifacts {
        html: &e.html,
        layout: &reference.layout,
        page_size: page_size(&reference.image),
        image: &reference.image,
    };
    let c = PageArtifacts {
        html: &html,
        layout: &cand.layout,
        page_size: page_size(&cand.image),
        image: &cand.image,
    };
    Outcome::Done(evaluate_sample(&e.id, &r, &c, embedder))
}

/// Evaluates `entries` with `workers` threads, each driving its own browser.
/// Samples already present in the journal are not evaluated again.
pub fn run_benchmark(
    entries: &[DatasetEntry],
    split_name: &str,
    generator: &dyn Generator,
    embedder: &dyn ImageEmbedder,
    cfg: &BenchConfig,
    base: &Path,
) -> Result<MetricReport, BenchError> {
    cfg.render.validate()?;
    find_browser(&cfg.render)?;
    let mut done = cfg.journal.as_deref().map(read_journal).unwrap_or_default();
    done.retain(|id, _| entries.iter().any(|e| &e.id == id));
    let todo: Vec<&DatasetEntry> = entries.iter().filter(|e| !done.contains_key(&e.id)).collect();
    log::info!(
        "benchmark {split_name}: {} to evaluate, {} from journal",
        todo.len(),
        done.len()
    );

    let journal = match &cfg.journal {
        Some(p) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|source| BenchError::Io {
                    path: p.clone(),
                    source,
                })?,
        )),
        None => None,
    };
    let queue = Mutex::new(todo.into_iter());
    let results = Mutex::new(Vec::new());
    let abort: Mutex<Option<String>> = Mutex::new(None);
    let stop = AtomicBool::new(false);
    let startup: Mutex<Option<RenderError>> = Mutex::new(None);

    thread::scope(|s| {
        for _ in 0..cfg.workers.max(1).min(entries.len().max(1)) {
            s.spawn(|| {
                let mut renderer = match Renderer::new(cfg.render.clone()) {
                    Ok(r) => r,
                    Err(e) => {
                        startup.lock().expect("startup slot").get_or_insert(e);
                        stop.store(true, Ordering::SeqCst);
                        return;
                    }
                };
                while !stop.load(Ordering::SeqCst) {
                    let Some(e) = queue.lock().expect("queue").next() else {
                        break;
                    };
                    match evaluate_one(e, base, generator, embedder, &mut renderer) {
                        Outcome::Done(m) => {
                            if let Some(j) = &journal {
                                let mut line = serde_json::to_string(&m).expect("metrics serialize");
                                line.push('\n');
                                let mut j = j.lock().expect("journal");
                                if let Err(err) = j.write_all(line.as_bytes()).and_then(|()| j.flush()) {
                                    log::warn!("journal write failed: {err}");
                                }
                            }
                            results.lock().expect("results").push(m);
                        }
                        Outcome::Fatal(why) => {
                            abort.lock().expect("abort slot").get_or_insert(why);
                            stop.store(true, Ordering::SeqCst);
                        }
                    }
                }
            });
        }
    });

    if let Some(e) = startup.into_inner().expect("startup slot") {
        return Err(e.into());
    }
    let fresh = results.into_inner().expect("results");
    if let Some(reason) = abort.into_inner().expect("abort slot") {
        return Err(BenchError::Aborted {
            done: done.len() + fresh.len(),
            reason,
        });
    }
    let mut all: Vec<SampleMetrics> = done.into_values().collect();
    all.extend(fresh);
    Ok(MetricReport::new(generator.name(), split_name, all))
}
