//! Stage chaining with content-addressed checkpoints and a removal funnel.
//!
//! Every stage is a function from a list of [`Sample`]s to a [`StageOut`]:
//! the survivors, the samples parked because a service was unavailable, and
//! removal counts by reason. The same functions back the single-stage CLI
//! subcommands, so their manifests are interchangeable with checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use webcurate_core::curate::{
    corpus_stats, embedding_dedup, hash_dedup, partition, DatasetEntry, HasScreenshot, PartitionConfig, Split,
};
use webcurate_core::dom::code_stats;
use webcurate_core::ingest::{CssSource, RawPage};
use webcurate_core::layout::RenderArtifact;
use webcurate_core::manifest::{self, write_atomic, ManifestError};
use webcurate_core::purify::{cleanse_batch, length_filter};
use webcurate_core::quality::{final_verdict, score_with_model, AnnotationStore, QualityError, ScoreSource};
use webcurate_core::safety::{bad_words_pass, nsfw_gate, visible_text, SafetyError, WordLists};
use webcurate_core::service::{ImageEmbedder, NsfwDetector, QualityScorer};
use webcurate_core::{exec, CodeStats, Gpt2Tokenizer, Mode};
use webcurate_render::{find_browser, render_batch, RenderError, RenderJob};

use crate::clients;
use crate::config::{DedupStage, LengthStage, PartitionStage, PipelineConfig, RenderStage, SafetyStage};

/// Bumped whenever stage semantics change, so old checkpoints stop matching.
const CHECKPOINT_FORMAT: &str = "webcurate-checkpoint/1";

pub const STAGES: [&str; 8] = [
    "length",
    "cleanse",
    "render",
    "score",
    "safety",
    "dedup",
    "partition",
    "stats",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("render: {0}")]
    Render(#[from] RenderError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One page as it moves through the stages. A raw ingest manifest is a valid
/// sample manifest: everything past the page fields defaults to empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    #[serde(default)]
    pub url: String,
    pub html: String,
    /// Only populated before cleansing, which merges CSS into the document.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub css_sources: Vec<CssSource>,
    #[serde(default)]
    pub fetched_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
    #[serde(default)]
    pub page_size: [f64; 2],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clipped: bool,
    #[serde(default)]
    pub substituted_images: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_source: Option<ScoreSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nsfw_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bad_word_count: Option<usize>,
    /// Near-duplicate of a better-ranked test candidate; kept for training only.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<CodeStats>,
    /// Why the sample was parked, if it was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parked: Option<String>,
}

impl Sample {
    pub fn raw_page(&self) -> RawPage {
        RawPage {
            id: self.id.clone(),
            url: self.url.clone(),
            html: self.html.clone(),
            css_sources: self.css_sources.clone(),
            fetched_at: self.fetched_at,
        }
    }

    fn screenshot_png(&self, base: &Path) -> Result<Vec<u8>, String> {
        let rel = self.screenshot.as_ref().ok_or("no screenshot")?;
        fs::read(base.join(rel)).map_err(|e| e.to_string())
    }

    /// Dataset row; statistics are computed here if no earlier stage did.
    pub fn to_entry(&self, tok: &Gpt2Tokenizer) -> DatasetEntry {
        let stats = self
            .stats
            .or_else(|| code_stats(&self.html, tok).ok())
            .unwrap_or_default();
        let split = self
            .split
            .unwrap_or(if self.excluded { Split::Excluded } else { Split::Train });
        DatasetEntry {
            id: self.id.clone(),
            html: self.html.clone(),
            screenshot_ref: self.screenshot.clone().unwrap_or_default(),
            layout_ref: self.layout.clone().unwrap_or_default(),
            score: self.score.unwrap_or(0.0),
            token_len: stats.token_len,
            split,
            stats,
        }
    }
}

impl From<RawPage> for Sample {
    fn from(p: RawPage) -> Self {
        Sample {
            id: p.id,
            url: p.url,
            html: p.html,
            css_sources: p.css_sources,
            fetched_at: p.fetched_at,
            screenshot: None,
            layout: None,
            page_size: [0.0, 0.0],
            clipped: false,
            substituted_images: 0,
            score: None,
            score_source: None,
            nsfw_score: None,
            bad_word_count: None,
            excluded: false,
            split: None,
            stats: None,
            parked: None,
        }
    }
}

static NO_PATH: &str = "";

impl HasScreenshot for Sample {
    fn id(&self) -> &str {
        &self.id
    }
    fn screenshot(&self) -> &Path {
        self.screenshot.as_deref().unwrap_or(Path::new(NO_PATH))
    }
}

#[derive(Debug, Default)]
pub struct StageOut {
    pub kept: Vec<Sample>,
    pub parked: Vec<Sample>,
    pub removed: BTreeMap<String, usize>,
    /// Informational counters that do not affect the funnel.
    pub details: BTreeMap<String, u64>,
    /// Free-form report text, such as the partition table.
    pub text: Option<String>,
}

impl StageOut {
    fn passthrough(kept: Vec<Sample>) -> Self {
        StageOut {
            kept,
            ..Default::default()
        }
    }

    fn remove(&mut self, reason: impl Into<String>) {
        *self.removed.entry(reason.into()).or_default() += 1;
    }

    fn park(&mut self, mut s: Sample, reason: String) {
        s.parked = Some(reason);
        self.parked.push(s);
    }

    pub fn removed_total(&self) -> usize {
        self.removed.values().sum()
    }
}

pub fn length_stage(samples: Vec<Sample>, cfg: &LengthStage) -> StageOut {
    let gate = cfg.gate();
    let mut out = StageOut::default();
    for s in samples {
        let v = length_filter(&s.raw_page(), &gate);
        if !v.pass {
            out.remove(if gate.html_range.contains(v.html_len) {
                "css_length"
            } else {
                "html_length"
            });
        } else {
            out.kept.push(s);
        }
    }
    out
}

pub fn cleanse_stage(samples: Vec<Sample>, cfg: &crate::config::CleanseStage, mode: Mode) -> StageOut {
    let pages: Vec<RawPage> = samples.iter().map(Sample::raw_page).collect();
    let results = cleanse_batch(&pages, &cfg.cleanse_config(), mode);
    let mut out = StageOut::default();
    for (mut s, r) in samples.into_iter().zip(results) {
        match r {
            Ok(p) => {
                let rr = p.removed_report;
                for (k, v) in [
                    ("comments", rr.comments),
                    ("meta", rr.meta),
                    ("script", rr.script),
                    ("hidden", rr.hidden),
                    ("attributes", rr.attributes),
                    ("dead_css_rules", rr.dead_css_rules),
                    ("unresolved_css", rr.unresolved_css),
                ] {
                    *out.details.entry(k.into()).or_default() += v as u64;
                }
                s.html = p.html;
                s.css_sources.clear();
                out.kept.push(s);
            }
            Err(e) => {
                log::debug!("{}: {e}", s.id);
                out.remove("unparsable");
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RenderRecord {
    id: String,
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    page_size: [f64; 2],
    clipped: bool,
    substituted_images: usize,
}

const RENDER_JOURNAL: &str = "journal.jsonl";

fn read_render_journal(path: &Path) -> BTreeMap<String, RenderRecord> {
    let Ok(f) = File::open(path) else {
        return BTreeMap::new();
    };
    // A torn final line from an interrupted run simply fails to parse.
    BufReader::new(f)
        .lines()
        .map_while(Result::ok)
        .filter_map(|l| serde_json::from_str::<RenderRecord>(&l).ok())
        .map(|r| (r.id.clone(), r))
        .collect()
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| path.to_path_buf())
}

/// Renders into `out_dir/{shots,layouts}`. Completed pages are journaled as
/// they finish, so a rerun after an interruption only renders the rest.
/// Stored paths are relative to `base` when `out_dir` lies under it.
pub fn render_stage(
    samples: Vec<Sample>,
    cfg: &RenderStage,
    out_dir: &Path,
    base: &Path,
) -> Result<StageOut, PipelineError> {
    let rcfg = cfg.render_config();
    let shots = out_dir.join("shots");
    let layouts = out_dir.join("layouts");
    for d in [&shots, &layouts] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let journal_path = out_dir.join(RENDER_JOURNAL);
    let shot_path = |id: &str| shots.join(format!("{id}.png"));
    let layout_path = |id: &str| layouts.join(format!("{id}.json"));

    let mut done = read_render_journal(&journal_path);
    done.retain(|id, r| !r.ok || (shot_path(id).is_file() && layout_path(id).is_file()));

    let wanted: BTreeSet<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    let jobs: Vec<RenderJob> = samples
        .iter()
        .filter(|s| !done.contains_key(&s.id))
        .map(|s| RenderJob {
            id: s.id.clone(),
            html: s.html.clone(),
        })
        .collect();
    log::info!(
        "render: {} to do, {} already journaled",
        jobs.len(),
        done.keys().filter(|k| wanted.contains(k.as_str())).count()
    );

    let journal = Mutex::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(io_err(&journal_path))?,
    );
    let write_err: Mutex<Option<PipelineError>> = Mutex::new(None);
    let on_done = |a: &RenderArtifact| {
        let res = persist_artifact(a, &shot_path(&a.id), &layout_path(&a.id)).and_then(|()| {
            let rec = RenderRecord {
                id: a.id.clone(),
                ok: a.render_ok,
                reason: a.failure_reason.clone(),
                page_size: a.page_size,
                clipped: a.clipped,
                substituted_images: a.substituted_images,
            };
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            let mut j = journal.lock().expect("journal");
            j.write_all(line.as_bytes())
                .and_then(|()| j.flush())
                .map_err(io_err(&journal_path))
        });
        if let Err(e) = res {
            write_err.lock().expect("error slot").get_or_insert(e);
        }
    };
    let fresh = render_batch(jobs, &rcfg, cfg.pool, &on_done)?;
    if let Some(e) = write_err.into_inner().expect("error slot") {
        return Err(e);
    }
    for a in fresh {
        done.insert(
            a.id.clone(),
            RenderRecord {
                id: a.id,
                ok: a.render_ok,
                reason: a.failure_reason,
                page_size: a.page_size,
                clipped: a.clipped,
                substituted_images: a.substituted_images,
            },
        );
    }

    let mut out = StageOut::default();
    for mut s in samples {
        let Some(rec) = done.get(&s.id) else {
            out.remove("render_missing");
            continue;
        };
        if !rec.ok {
            let reason = rec.reason.as_deref().unwrap_or("failed");
            out.remove(if reason == "timeout" {
                "render_timeout".to_string()
            } else {
                "render_failed".to_string()
            });
            continue;
        }
        s.screenshot = Some(relative_to(&shot_path(&s.id), base));
        s.layout = Some(relative_to(&layout_path(&s.id), base));
        s.page_size = rec.page_size;
        s.clipped = rec.clipped;
        s.substituted_images = rec.substituted_images;
        *out.details.entry("clipped".into()).or_default() += rec.clipped as u64;
        *out.details.entry("substituted_images".into()).or_default() += rec.substituted_images as u64;
        out.kept.push(s);
    }
    Ok(out)
}

fn persist_artifact(a: &RenderArtifact, shot: &Path, layout: &Path) -> Result<(), PipelineError> {
    if !a.render_ok {
        return Ok(());
    }
    if let Some(png) = &a.screenshot {
        write_atomic(shot, png).map_err(io_err(shot))?;
    }
    if let Some(l) = &a.layout {
        let json = serde_json::to_vec(l).expect("layout serializes");
        write_atomic(layout, &json).map_err(io_err(layout))?;
    }
    Ok(())
}

/// Human consensus from `store` wins; otherwise the scorer is asked.
pub fn score_stage(
    samples: Vec<Sample>,
    scorer: &dyn QualityScorer,
    store: Option<&AnnotationStore>,
    retry: &webcurate_core::service::RetryPolicy,
    base: &Path,
    mode: Mode,
) -> StageOut {
    let results = exec::map(mode, &samples, |s| {
        let human = store.and_then(|st| st.human_score(&s.id));
        if human.is_some() {
            return Ok(final_verdict(&s.id, None, human).expect("human score"));
        }
        let png = s.screenshot_png(base).map_err(|reason| QualityError::Protocol {
            sample_id: s.id.clone(),
            reason,
        })?;
        score_with_model(&s.id, &png, scorer, retry)
    });
    let mut out = StageOut::default();
    for (mut s, r) in samples.into_iter().zip(results) {
        match r {
            Ok(v) => {
                s.score = Some(v.score);
                s.score_source = Some(v.source);
                if v.keep {
                    out.kept.push(s);
                } else {
                    out.remove("low_score");
                }
            }
            Err(QualityError::ScoreUnavailable { reason, .. }) => out.park(s, format!("scorer: {reason}")),
            Err(e) => {
                log::warn!("{e}");
                out.remove("score_error");
            }
        }
    }
    out
}

pub fn safety_stage(
    samples: Vec<Sample>,
    detector: &dyn NsfwDetector,
    lists: &WordLists,
    cfg: &SafetyStage,
    retry: &webcurate_core::service::RetryPolicy,
    base: &Path,
    mode: Mode,
) -> StageOut {
    let results = exec::map(mode, &samples, |s| {
        let png = s.screenshot_png(base).map_err(|reason| SafetyError::Protocol {
            sample_id: s.id.clone(),
            reason,
        })?;
        let (score, pass) = nsfw_gate(&s.id, &png, detector, cfg.nsfw_threshold, retry)?;
        let (count, _) = lists.count(&visible_text(&s.html));
        Ok::<_, SafetyError>((score, pass, count))
    });
    let mut out = StageOut::default();
    for (mut s, r) in samples.into_iter().zip(results) {
        match r {
            Ok((score, pass, count)) => {
                s.nsfw_score = Some(score);
                s.bad_word_count = Some(count);
                if !pass {
                    out.remove("nsfw");
                } else if !bad_words_pass(count, cfg.max_bad_words) {
                    out.remove("bad_words");
                } else {
                    out.kept.push(s);
                }
            }
            Err(SafetyError::Unavailable { reason, .. }) => out.park(s, format!("nsfw: {reason}")),
            Err(e) => {
                log::warn!("{e}");
                out.remove("safety_error");
            }
        }
    }
    out
}

/// Identical screenshots are removed outright. Near-duplicates by embedding
/// are only looked for among test candidates (score above `min_test_score`)
/// and are marked excluded rather than removed.
pub fn dedup_stage(
    samples: Vec<Sample>,
    embedder: &dyn ImageEmbedder,
    cfg: &DedupStage,
    min_test_score: f64,
    retry: &webcurate_core::service::RetryPolicy,
    base: &Path,
    mode: Mode,
) -> StageOut {
    let mut out = StageOut::default();
    let h = hash_dedup(samples, base, mode);
    out.removed.insert("duplicate_screenshot".into(), h.report.duplicates);
    out.removed.insert("unreadable_screenshot".into(), h.report.unreadable);
    out.removed.retain(|_, v| *v > 0);

    let (cands, mut rest): (Vec<Sample>, Vec<Sample>) = h
        .kept
        .into_iter()
        .partition(|s| !s.excluded && s.score.is_some_and(|v| v > min_test_score));
    let e = embedding_dedup(cands, base, embedder, cfg.threshold, retry, mode);
    out.details
        .insert("near_duplicates_excluded".into(), e.report.duplicates as u64);
    rest.extend(e.kept);
    rest.extend(e.dropped.into_iter().map(|mut s| {
        s.excluded = true;
        s
    }));
    for s in e.parked {
        out.park(s, "embedder unavailable".into());
    }
    rest.sort_by(|a, b| a.id.cmp(&b.id));
    out.kept = rest;
    out
}

/// Reads a list of ids, one per line, `#` comments allowed.
pub fn read_id_list(path: &Path) -> Result<BTreeSet<String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn partition_stage(
    samples: Vec<Sample>,
    cfg: &PartitionStage,
    not_test: &BTreeSet<String>,
    tok: &Gpt2Tokenizer,
    mode: Mode,
) -> StageOut {
    let stats = exec::map(mode, &samples, |s| code_stats(&s.html, tok));
    let mut out = StageOut::default();
    let mut kept = Vec::with_capacity(samples.len());
    for (mut s, r) in samples.into_iter().zip(stats) {
        match r {
            Ok(st) => {
                s.stats = Some(st);
                kept.push(s);
            }
            Err(_) => out.remove("unparsable"),
        }
    }
    let mut entries: Vec<DatasetEntry> = kept
        .iter()
        .map(|s| {
            let mut e = s.to_entry(tok);
            e.split = if s.excluded { Split::Excluded } else { Split::Train };
            e
        })
        .collect();
    let pcfg = PartitionConfig {
        per_split: cfg.per_split,
        seed: cfg.seed,
        min_test_score: cfg.min_test_score,
    };
    let report = partition(&mut entries, &pcfg, not_test);
    for (s, e) in kept.iter_mut().zip(&entries) {
        s.split = Some(e.split);
    }
    let mut text = report.table();
    for w in &report.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    out.text = Some(text);
    out.kept = kept;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub enabled: bool,
    pub key: String,
    pub input: usize,
    pub output: usize,
    pub removed: BTreeMap<String, usize>,
    pub parked: usize,
    #[serde(default)]
    pub details: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Loaded from an existing checkpoint rather than computed.
    #[serde(default)]
    pub resumed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Funnel {
    pub input: usize,
    pub stages: Vec<StageReport>,
    pub removed: usize,
    pub parked: usize,
    pub output: usize,
}

impl Funnel {
    /// Every input sample is accounted for exactly once.
    pub fn is_conserved(&self) -> bool {
        self.input == self.removed + self.parked + self.output
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>8}\n",
            "stage", "in", "removed", "parked", "out"
        );
        for r in &self.stages {
            let name = if r.enabled {
                r.stage.clone()
            } else {
                format!("{} (off)", r.stage)
            };
            s.push_str(&format!(
                "{:<10} {:>8} {:>8} {:>8} {:>8}\n",
                name,
                r.input,
                r.removed.values().sum::<usize>(),
                r.parked,
                r.output
            ));
        }
        s.push_str(&format!(
            "total: {} in, {} removed, {} parked, {} out\n",
            self.input, self.removed, self.parked, self.output
        ));
        s
    }
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub funnel: Funnel,
    pub dataset: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn file_digest(paths: &[PathBuf]) -> Result<String, PipelineError> {
    let mut parts = Vec::new();
    for p in paths {
        parts.push(fs::read(p).map_err(io_err(p))?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(hex_digest(&refs))
}

/// Clients, word lists and id lists, all built before any stage runs so a
/// configuration problem never surfaces halfway through.
struct Prepared {
    scorer: Option<Box<dyn QualityScorer>>,
    store: Option<AnnotationStore>,
    nsfw: Option<Box<dyn NsfwDetector>>,
    lists: WordLists,
    embedder: Option<Box<dyn ImageEmbedder>>,
    reject: BTreeSet<String>,
    /// Extra key material for stages whose output depends on file contents.
    safety_key: String,
    partition_key: String,
    score_key: String,
}

fn prepare(cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    cfg.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
    let conf = PipelineError::Config;
    if cfg.render.enabled {
        find_browser(&cfg.render.render_config()).map_err(|e| conf(e.to_string()))?;
    }
    let svc = &cfg.services;
    let scorer = cfg
        .score
        .enabled
        .then(|| clients::scorer(&cfg.score.scorer, svc))
        .transpose()
        .map_err(conf)?;
    let store = match (&cfg.score.enabled, &cfg.score.store) {
        (true, Some(p)) => Some(AnnotationStore::open(p).map_err(|e| PipelineError::Config(e.to_string()))?),
        _ => None,
    };
    let nsfw = cfg
        .safety
        .enabled
        .then(|| clients::nsfw_detector(&cfg.safety.nsfw, svc))
        .transpose()
        .map_err(conf)?;
    let lists = if cfg.safety.enabled && !cfg.safety.badwords.is_empty() {
        WordLists::load(&cfg.safety.badwords).map_err(|e| PipelineError::Config(e.to_string()))?
    } else {
        WordLists::from_words(std::iter::empty::<&str>())
    };
    let embedder = cfg
        .dedup
        .enabled
        .then(|| clients::embedder(&cfg.dedup.embedder, svc))
        .transpose()
        .map_err(conf)?;
    let reject = match (&cfg.partition.enabled, &cfg.partition.reject_list) {
        (true, Some(p)) => read_id_list(p).map_err(|e| PipelineError::Config(e.to_string()))?,
        _ => BTreeSet::new(),
    };
    let safety_key = if cfg.safety.enabled {
        file_digest(&cfg.safety.badwords)?
    } else {
        String::new()
    };
    let partition_key = hex_digest(&[reject.iter().cloned().collect::<Vec<_>>().join("\n").as_bytes()]);
    // Human labels change scores, so the store contents are part of the key.
    let score_key = match &store {
        Some(s) => hex_digest(&[serde_json::to_string(&s.annotations())
            .expect("annotations serialize")
            .as_bytes()]),
        None => String::new(),
    };
    Ok(Prepared {
        scorer,
        store,
        nsfw,
        lists,
        embedder,
        reject,
        safety_key,
        partition_key,
        score_key,
    })
}

/// Runs the enabled stages over the raw manifest `input`, writing checkpoints
/// under `work/checkpoints` and the final outputs directly under `work`.
pub fn run_pipeline(cfg: &PipelineConfig, input: &Path, work: &Path) -> Result<PipelineOutcome, PipelineError> {
    let prep = prepare(cfg)?;
    let input_bytes = fs::read(input).map_err(|e| PipelineError::Input(format!("{}: {e}", input.display())))?;
    let raw: Vec<Sample> = manifest::read_jsonl(input).map_err(|e| PipelineError::Input(e.to_string()))?;
    let mut seen = BTreeSet::new();
    if let Some(dup) = raw.iter().find(|s| !seen.insert(s.id.clone())) {
        return Err(PipelineError::Input(format!("duplicate sample id {}", dup.id)));
    }
    let ckpt_dir = work.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let mode = if cfg.parallel { Mode::Parallel } else { Mode::Sequential };
    let tok = Gpt2Tokenizer::embedded();
    let retry = cfg.services.retry;

    let input_count = raw.len();
    let mut key = hex_digest(&[CHECKPOINT_FORMAT.as_bytes(), &input_bytes]);
    let mut current = raw;
    let mut reports = Vec::new();
    let mut parked_all: Vec<Sample> = Vec::new();

    for (idx, &stage) in STAGES.iter().enumerate() {
        let (enabled, stage_cfg, extra) = match stage {
            "length" => (cfg.length.enabled, serde_json::to_string(&cfg.length), String::new()),
            "cleanse" => (cfg.cleanse.enabled, serde_json::to_string(&cfg.cleanse), String::new()),
            "render" => (cfg.render.enabled, serde_json::to_string(&cfg.render), String::new()),
            "score" => (
                cfg.score.enabled,
                serde_json::to_string(&cfg.score),
                prep.score_key.clone(),
            ),
            "safety" => (
                cfg.safety.enabled,
                serde_json::to_string(&cfg.safety),
                prep.safety_key.clone(),
            ),
            "dedup" => (
                cfg.dedup.enabled,
                serde_json::to_string(&(&cfg.dedup, cfg.partition.min_test_score)),
                String::new(),
            ),
            "partition" => (
                cfg.partition.enabled,
                serde_json::to_string(&cfg.partition),
                prep.partition_key.clone(),
            ),
            "stats" => (cfg.stats.enabled, serde_json::to_string(&cfg.stats), String::new()),
            _ => unreachable!(),
        };
        let stage_cfg = stage_cfg.expect("stage config serializes");
        key = hex_digest(&[
            stage.as_bytes(),
            &[enabled as u8],
            stage_cfg.as_bytes(),
            extra.as_bytes(),
            key.as_bytes(),
        ]);
        let stem = format!("{:02}-{stage}-{}", idx + 1, &key[..12]);
        let kept_path = ckpt_dir.join(format!("{stem}.jsonl"));
        let parked_path = ckpt_dir.join(format!("{stem}.parked.jsonl"));
        let report_path = ckpt_dir.join(format!("{stem}.report.json"));

        if let Some(mut report) = load_report(&report_path) {
            if let (Ok(kept), Ok(parked)) = (
                manifest::read_jsonl::<Sample>(&kept_path),
                manifest::read_jsonl::<Sample>(&parked_path),
            ) {
                log::info!("{stage}: resumed from checkpoint {stem}");
                report.resumed = true;
                current = kept;
                parked_all.extend(parked);
                reports.push(report);
                continue;
            }
        }
        remove_stale(&ckpt_dir, &format!("{:02}-{stage}-", idx + 1), &stem);

        let input_n = current.len();
        let samples = std::mem::take(&mut current);
        let out = if !enabled {
            StageOut::passthrough(samples)
        } else {
            match stage {
                "length" => length_stage(samples, &cfg.length),
                "cleanse" => cleanse_stage(samples, &cfg.cleanse, mode),
                "render" => {
                    let dir = work.join("artifacts").join(format!("render-{}", &key[..12]));
                    render_stage(samples, &cfg.render, &dir, work)?
                }
                "score" => score_stage(
                    samples,
                    prep.scorer.as_deref().expect("scorer"),
                    prep.store.as_ref(),
                    &retry,
                    work,
                    mode,
                ),
                "safety" => safety_stage(
                    samples,
                    prep.nsfw.as_deref().expect("detector"),
                    &prep.lists,
                    &cfg.safety,
                    &retry,
                    work,
                    mode,
                ),
                "dedup" => dedup_stage(
                    samples,
                    prep.embedder.as_deref().expect("embedder"),
                    &cfg.dedup,
                    cfg.partition.min_test_score,
                    &retry,
                    work,
                    mode,
                ),
                "partition" => partition_stage(samples, &cfg.partition, &prep.reject, tok, mode),
                "stats" => StageOut::passthrough(samples),
                _ => unreachable!(),
            }
        };
        let report = StageReport {
            stage: stage.to_string(),
            enabled,
            key: key.clone(),
            input: input_n,
            output: out.kept.len(),
            removed: out.removed.clone(),
            parked: out.parked.len(),
            details: out.details.clone(),
            text: out.text.clone(),
            resumed: false,
        };
        debug_assert_eq!(input_n, report.output + out.removed_total() + report.parked);
        manifest::write_jsonl(&kept_path, &out.kept)?;
        manifest::write_jsonl(&parked_path, &out.parked)?;
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        write_atomic(&report_path, &json).map_err(io_err(&report_path))?;
        log::info!(
            "{stage}: {input_n} in, {} out, {} removed, {} parked",
            report.output,
            out.removed_total(),
            report.parked
        );
        current = out.kept;
        parked_all.extend(out.parked);
        reports.push(report);
    }

    let mut entries: Vec<DatasetEntry> = current.iter().map(|s| s.to_entry(tok)).collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let dataset = work.join("dataset.jsonl");
    manifest::write_jsonl(&dataset, &entries)?;
    parked_all.sort_by(|a, b| a.id.cmp(&b.id));
    manifest::write_jsonl(&work.join("parked.jsonl"), &parked_all)?;

    let funnel = Funnel {
        input: input_count,
        removed: reports.iter().map(|r| r.removed.values().sum::<usize>()).sum(),
        parked: parked_all.len(),
        output: entries.len(),
        stages: reports,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = work.join(name);
        write_atomic(&p, bytes).map_err(io_err(&p))
    };
    write(
        "funnel.json",
        &serde_json::to_vec_pretty(&funnel).expect("funnel serializes"),
    )?;
    write("funnel.txt", funnel.to_text().as_bytes())?;
    if let Some(t) = funnel
        .stages
        .iter()
        .find(|r| r.stage == "partition")
        .and_then(|r| r.text.as_ref())
    {
        write("partition.txt", t.as_bytes())?;
    }
    if cfg.stats.enabled {
        let table = corpus_stats(&entries);
        write("stats.csv", table.to_csv().as_bytes())?;
        write("stats.txt", table.to_text().as_bytes())?;
    }
    if let Some(store) = &prep.store {
        store.flush().map_err(|e| PipelineError::Input(e.to_string()))?;
    }
    Ok(PipelineOutcome {
        funnel,
        dataset,
        entries,
    })
}

fn load_report(path: &Path) -> Option<StageReport> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Drops checkpoints of the same stage made under a different key.
fn remove_stale(dir: &Path, prefix: &str, keep: &str) {
    let Ok(rd) = fs::read_dir(dir) else { return };
    for e in rd.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if name.starts_with(prefix) && !name.starts_with(keep) {
            let _ = fs::remove_file(e.path());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{MockNsfw, MockScorer};

    fn sample(id: &str, html: &str) -> Sample {
        let mut s = Sample::from(RawPage::from_html(format!("file:///{id}.html"), html, 0));
        s.id = id.to_string();
        s
    }

    fn with_shot(dir: &Path, id: &str, bytes: &[u8]) -> Sample {
        fs::write(dir.join(format!("{id}.png")), bytes).unwrap();
        let mut s = sample(id, "<html><body><p>hello world</p></body></html>");
        s.screenshot = Some(PathBuf::from(format!("{id}.png")));
        s
    }

    #[test]
    fn raw_manifest_rows_parse_as_samples() {
        let p = RawPage::from_html("file:///a.html", "<p>x</p>", 5);
        let s: Sample = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(s.raw_page(), p);
        assert!(s.screenshot.is_none() && s.split.is_none());
    }

    #[test]
    fn length_stage_names_the_failing_side() {
        let cfg = LengthStage {
            html_range: "10:100".parse().unwrap(),
            css_range: "0:5".parse().unwrap(),
            ..Default::default()
        };
        let ok = sample("a", "<p>0123456789</p>");
        let long_css = sample("b", "<style>p{color:red}</style><p>x</p>");
        let tiny = sample("c", "<p>");
        let out = length_stage(vec![ok, long_css, tiny], &cfg);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.removed.get("css_length"), Some(&1));
        assert_eq!(out.removed.get("html_length"), Some(&1));
    }

    #[test]
    fn score_stage_parks_unavailable_and_prefers_humans() {
        struct Down;
        impl QualityScorer for Down {
            fn score(&self, _: &[u8]) -> Result<f64, webcurate_core::service::ServiceError> {
                Err(webcurate_core::service::ServiceError::Unavailable("down".into()))
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let a = with_shot(dir.path(), "a", b"a");
        let b = with_shot(dir.path(), "b", b"b");
        let store = AnnotationStore::in_memory();
        store.add_sample("a", None).unwrap();
        store.register_annotator("ann", Some(1)).unwrap();
        store
            .record_annotation(
                webcurate_core::quality::AnnotationInput {
                    sample_id: "a".into(),
                    annotator_id: "ann".into(),
                    criteria: webcurate_core::quality::Criteria::from_array([true, true, true, false, false]),
                    score: None,
                },
                0,
            )
            .unwrap();
        let retry = webcurate_core::service::RetryPolicy::none();
        let out = score_stage(vec![a, b], &Down, Some(&store), &retry, dir.path(), Mode::Sequential);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].score, Some(3.0));
        assert_eq!(out.kept[0].score_source, Some(ScoreSource::Human));
        assert_eq!(out.parked.len(), 1);
        assert!(out.parked[0].parked.as_deref().unwrap().contains("down"));
    }

    #[test]
    fn safety_stage_applies_both_rules() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = with_shot(dir.path(), "a", b"a");
        a.html = format!("<html><body><p>{}</p></body></html>", "zork ".repeat(21));
        let b = with_shot(dir.path(), "b", b"b");
        let lists = WordLists::from_words(["zork"]);
        let cfg = SafetyStage::default();
        let retry = webcurate_core::service::RetryPolicy::none();
        let out = safety_stage(
            vec![a, b.clone()],
            &MockNsfw(Some(0.01)),
            &lists,
            &cfg,
            &retry,
            dir.path(),
            Mode::Sequential,
        );
        assert_eq!(out.removed.get("bad_words"), Some(&1));
        assert_eq!(out.kept.len(), 1);
        let out = safety_stage(
            vec![b],
            &MockNsfw(Some(0.04)),
            &lists,
            &cfg,
            &retry,
            dir.path(),
            Mode::Sequential,
        );
        assert_eq!(out.removed.get("nsfw"), Some(&1));
    }

    #[test]
    fn dedup_removes_identical_and_excludes_near_test_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = with_shot(dir.path(), "a", &png(10));
        let mut b = with_shot(dir.path(), "b", &png(10));
        let mut c = with_shot(dir.path(), "c", &png(11));
        let mut d = with_shot(dir.path(), "d", &png(200));
        for s in [&mut a, &mut b, &mut c, &mut d] {
            s.score = Some(4.5);
        }
        let retry = webcurate_core::service::RetryPolicy::none();
        let emb = webcurate_core::service::ThumbnailEmbedder;
        let out = dedup_stage(
            vec![d, c, b, a],
            &emb,
            &DedupStage::default(),
            4.0,
            &retry,
            dir.path(),
            Mode::Sequential,
        );
        assert_eq!(out.removed.get("duplicate_screenshot"), Some(&1));
        let ids: Vec<(&str, bool)> = out.kept.iter().map(|s| (s.id.as_str(), s.excluded)).collect();
        assert_eq!(ids, vec![("a", false), ("c", true), ("d", false)]);
    }

    fn png(v: u8) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(16, 16, image::Rgb([v, v, v]));
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        buf.into_inner()
    }

    #[test]
    fn partition_stage_fills_split_and_stats() {
        let mut ss: Vec<Sample> = (0..5)
            .map(|i| {
                let mut s = sample(&format!("s{i}"), "<html><body><div><p>x</p></div></body></html>");
                s.score = Some(4.5);
                s
            })
            .collect();
        ss[0].excluded = true;
        let cfg = PartitionStage {
            per_split: 2,
            ..Default::default()
        };
        let reject: BTreeSet<String> = ["s1".to_string()].into();
        let out = partition_stage(ss, &cfg, &reject, Gpt2Tokenizer::embedded(), Mode::Sequential);
        let splits: Vec<Split> = out.kept.iter().map(|s| s.split.unwrap()).collect();
        assert_eq!(splits[0], Split::Excluded);
        assert_eq!(splits[1], Split::Train);
        assert_eq!(splits.iter().filter(|s| **s == Split::Short).count(), 2);
        assert!(out.kept.iter().all(|s| s.stats.is_some()));
        assert!(out.text.unwrap().contains("warning"));
    }

    #[test]
    fn mock_scorer_keeps_fixed_high_score() {
        let dir = tempfile::tempdir().unwrap();
        let a = with_shot(dir.path(), "a", b"a");
        let retry = webcurate_core::service::RetryPolicy::none();
        let out = score_stage(
            vec![a],
            &MockScorer(Some(1.5)),
            None,
            &retry,
            dir.path(),
            Mode::Parallel,
        );
        assert_eq!(out.removed.get("low_score"), Some(&1));
    }

    #[test]
    fn render_journal_ignores_torn_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(RENDER_JOURNAL);
        let rec = RenderRecord {
            id: "a".into(),
            ok: false,
            reason: Some("timeout".into()),
            page_size: [0.0, 0.0],
            clipped: false,
            substituted_images: 0,
        };
        fs::write(
            &p,
            format!("{}\n{{\"id\":\"b\",\"ok\":tr", serde_json::to_string(&rec).unwrap()),
        )
        .unwrap();
        let j = read_render_journal(&p);
        assert_eq!(j.len(), 1);
        assert_eq!(j["a"], rec);
    }
}
