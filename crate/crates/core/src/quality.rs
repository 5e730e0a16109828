//! Human quality annotation (five one-point criteria, group consensus), the
//! model-scorer client contract, and the score filter.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::service::{with_retry, QualityScorer, RetryPolicy, ServiceError};

/// Samples scoring below this are discarded.
pub const KEEP_THRESHOLD: f64 = 2.0;

pub const GROUP_COUNT: u32 = 2;

pub const CRITERION_LABELS: [&str; 5] = [
    "Normal webpage layout (human-designed layout, not simple auto single-column arrangement)",
    "Normal webpage styling (elements like lists and blocks are styled, not using default styles)",
    "No excessive blank areas",
    "Rich color combinations",
    "Good aesthetic appearance",
];

pub fn keep(score: f64) -> bool {
    score >= KEEP_THRESHOLD
}

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("unknown sample {0}")]
    NotFound(String),
    #[error("annotator {0} is not registered to a group")]
    Unregistered(String),
    #[error("no annotations for sample {sample_id} in group {group_id}")]
    NoAnnotations { sample_id: String, group_id: u32 },
    #[error("scorer unavailable for {sample_id}: {reason}")]
    ScoreUnavailable { sample_id: String, reason: String },
    #[error("scorer protocol error for {sample_id}: {reason}")]
    Protocol { sample_id: String, reason: String },
    #[error("annotation store {path}: {source}")]
    Store {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("annotation store {path}:{line}: {source}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criteria {
    pub layout_normal: bool,
    pub styling_normal: bool,
    pub no_excess_blank: bool,
    pub rich_color: bool,
    pub aesthetic: bool,
}

impl Criteria {
    pub fn from_array(v: [bool; 5]) -> Self {
        Criteria {
            layout_normal: v[0],
            styling_normal: v[1],
            no_excess_blank: v[2],
            rich_color: v[3],
            aesthetic: v[4],
        }
    }

    pub fn as_array(&self) -> [bool; 5] {
        [
            self.layout_normal,
            self.styling_normal,
            self.no_excess_blank,
            self.rich_color,
            self.aesthetic,
        ]
    }

    pub fn score(&self) -> u8 {
        self.as_array().iter().filter(|&&b| b).count() as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample_id: String,
    pub annotator_id: String,
    pub group_id: u32,
    pub criteria: Criteria,
    pub score: u8,
    pub annotated_at: i64,
}

/// What a client submits; any score it sends is ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationInput {
    pub sample_id: String,
    pub annotator_id: String,
    pub criteria: Criteria,
    #[serde(default)]
    pub score: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusScore {
    pub sample_id: String,
    pub group_id: u32,
    pub mean_score: f64,
    pub annotator_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVerdict {
    pub sample_id: String,
    pub score: f64,
    pub source: ScoreSource,
    pub keep: bool,
}

impl ScoreVerdict {
    pub fn new(sample_id: impl Into<String>, score: f64, source: ScoreSource) -> Self {
        ScoreVerdict {
            sample_id: sample_id.into(),
            score,
            source,
            keep: keep(score),
        }
    }
}

/// Asks the scorer about one screenshot. Transport failures are retried per
/// `retry` and then reported as `ScoreUnavailable` so the caller can park the
/// sample; scores outside `[0, 5]` are a protocol error.
pub fn score_with_model(
    sample_id: &str,
    png: &[u8],
    scorer: &dyn QualityScorer,
    retry: &RetryPolicy,
) -> Result<ScoreVerdict, QualityError> {
    match with_retry(retry, || scorer.score(png)) {
        Ok(s) if (0.0..=5.0).contains(&s) => Ok(ScoreVerdict::new(sample_id, s, ScoreSource::Model)),
        Ok(s) => Err(QualityError::Protocol {
            sample_id: sample_id.to_string(),
            reason: format!("score {s} outside [0, 5]"),
        }),
        Err(ServiceError::Unavailable(reason)) => Err(QualityError::ScoreUnavailable {
            sample_id: sample_id.to_string(),
            reason,
        }),
        Err(e) => Err(QualityError::Protocol {
            sample_id: sample_id.to_string(),
            reason: e.to_string(),
        }),
    }
}

/// Human consensus wins over the model whenever both exist.
pub fn final_verdict(sample_id: &str, model: Option<f64>, human: Option<f64>) -> Option<ScoreVerdict> {
    match (human, model) {
        (Some(h), _) => Some(ScoreVerdict::new(sample_id, h, ScoreSource::Human)),
        (None, Some(m)) => Some(ScoreVerdict::new(sample_id, m, ScoreSource::Model)),
        (None, None) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Event {
    Sample {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        screenshot: Option<PathBuf>,
    },
    Annotator {
        id: String,
        group: u32,
    },
    Annotation(Annotation),
}

#[derive(Debug, Default)]
struct State {
    samples: BTreeMap<String, Option<PathBuf>>,
    annotators: BTreeMap<String, u32>,
    annotations: BTreeMap<(String, String), Annotation>,
    journal_events: usize,
}

impl State {
    fn apply(&mut self, ev: Event) {
        match ev {
            Event::Sample { id, screenshot } => {
                self.samples.insert(id, screenshot);
            }
            Event::Annotator { id, group } => {
                self.annotators.insert(id, group);
            }
            Event::Annotation(a) => {
                self.annotations
                    .insert((a.sample_id.clone(), a.annotator_id.clone()), a);
            }
        }
    }

    fn live_events(&self) -> Vec<Event> {
        let mut out: Vec<Event> = self
            .samples
            .iter()
            .map(|(id, s)| Event::Sample {
                id: id.clone(),
                screenshot: s.clone(),
            })
            .collect();
        out.extend(self.annotators.iter().map(|(id, g)| Event::Annotator {
            id: id.clone(),
            group: *g,
        }));
        out.extend(self.annotations.values().cloned().map(Event::Annotation));
        out
    }
}

/// Annotation store backed by an append-only JSON Lines journal. Readers share
/// a lock; writers are serialized and each write is flushed before returning.
/// The journal is compacted on open and whenever dead entries outnumber live ones.
#[derive(Debug)]
pub struct AnnotationStore {
    path: Option<PathBuf>,
    state: RwLock<State>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl AnnotationStore {
    pub fn in_memory() -> Self {
        AnnotationStore {
            path: None,
            state: RwLock::new(State::default()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(path: &Path) -> Result<Self, QualityError> {
        let store_err = |source| QualityError::Store {
            path: path.to_path_buf(),
            source,
        };
        let mut state = State::default();
        match File::open(path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(store_err)?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let ev: Event = match serde_json::from_str(&line) {
                        Ok(ev) => ev,
                        // A torn final line from a crash mid-write is dropped.
                        Err(source) if source.is_eof() => break,
                        Err(source) => {
                            return Err(QualityError::Corrupt {
                                path: path.to_path_buf(),
                                line: i + 1,
                                source,
                            })
                        }
                    };
                    state.apply(ev);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(store_err(e)),
        }
        let store = AnnotationStore {
            path: Some(path.to_path_buf()),
            state: RwLock::new(state),
            writer: Mutex::new(None),
        };
        store.compact()?;
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Rewrites the journal with only live records.
    pub fn compact(&self) -> Result<(), QualityError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let store_err = |source| QualityError::Store {
            path: path.clone(),
            source,
        };
        let mut writer = self.writer.lock().expect("writer lock");
        let mut state = self.state.write().expect("state lock");
        let events = state.live_events();
        let mut buf = Vec::new();
        for ev in &events {
            serde_json::to_writer(&mut buf, ev).expect("events serialize");
            buf.push(b'\n');
        }
        crate::manifest::write_atomic(path, &buf).map_err(store_err)?;
        state.journal_events = events.len();
        let f = OpenOptions::new().append(true).open(path).map_err(store_err)?;
        *writer = Some(BufWriter::new(f));
        Ok(())
    }

    /// Flushes and fsyncs the journal.
    pub fn flush(&self) -> Result<(), QualityError> {
        let mut writer = self.writer.lock().expect("writer lock");
        if let (Some(w), Some(path)) = (writer.as_mut(), &self.path) {
            let store_err = |source| QualityError::Store {
                path: path.clone(),
                source,
            };
            w.flush().map_err(store_err)?;
            w.get_ref().sync_data().map_err(store_err)?;
        }
        Ok(())
    }

    fn commit(&self, ev: Event) -> Result<(), QualityError> {
        let mut writer = self.writer.lock().expect("writer lock");
        if let (Some(w), Some(path)) = (writer.as_mut(), &self.path) {
            let store_err = |source| QualityError::Store {
                path: path.clone(),
                source,
            };
            serde_json::to_writer(&mut *w, &ev).expect("events serialize");
            w.write_all(b"\n").map_err(store_err)?;
            w.flush().map_err(store_err)?;
        }
        let needs_compaction = {
            let mut state = self.state.write().expect("state lock");
            state.apply(ev);
            state.journal_events += 1;
            let live = state.samples.len() + state.annotators.len() + state.annotations.len();
            state.journal_events > 2 * live + 64
        };
        drop(writer);
        if needs_compaction {
            self.compact()?;
        }
        Ok(())
    }

    pub fn add_sample(&self, id: &str, screenshot: Option<PathBuf>) -> Result<(), QualityError> {
        {
            let state = self.state.read().expect("state lock");
            if state.samples.get(id) == Some(&screenshot) {
                return Ok(());
            }
        }
        self.commit(Event::Sample {
            id: id.to_string(),
            screenshot,
        })
    }

    pub fn has_sample(&self, id: &str) -> bool {
        self.state.read().expect("state lock").samples.contains_key(id)
    }

    pub fn screenshot_path(&self, id: &str) -> Option<PathBuf> {
        self.state
            .read()
            .expect("state lock")
            .samples
            .get(id)
            .cloned()
            .flatten()
    }

    pub fn group_of(&self, annotator: &str) -> Option<u32> {
        self.state
            .read()
            .expect("state lock")
            .annotators
            .get(annotator)
            .copied()
    }

    /// Registers an annotator, assigning groups round-robin unless one is
    /// requested. Re-registering returns the existing group.
    pub fn register_annotator(&self, id: &str, group: Option<u32>) -> Result<u32, QualityError> {
        let g = {
            let state = self.state.read().expect("state lock");
            if let Some(&g) = state.annotators.get(id) {
                return Ok(g);
            }
            group.unwrap_or(state.annotators.len() as u32 % GROUP_COUNT)
        };
        self.commit(Event::Annotator {
            id: id.to_string(),
            group: g,
        })?;
        Ok(g)
    }

    /// Upserts keyed by (sample, annotator); the score is always recomputed.
    pub fn record_annotation(&self, input: AnnotationInput, now: i64) -> Result<Annotation, QualityError> {
        let group_id = {
            let state = self.state.read().expect("state lock");
            if !state.samples.contains_key(&input.sample_id) {
                return Err(QualityError::NotFound(input.sample_id));
            }
            *state
                .annotators
                .get(&input.annotator_id)
                .ok_or_else(|| QualityError::Unregistered(input.annotator_id.clone()))?
        };
        let a = Annotation {
            score: input.criteria.score(),
            sample_id: input.sample_id,
            annotator_id: input.annotator_id,
            group_id,
            criteria: input.criteria,
            annotated_at: now,
        };
        self.commit(Event::Annotation(a.clone()))?;
        Ok(a)
    }

    pub fn len(&self) -> usize {
        self.state.read().expect("state lock").annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.state
            .read()
            .expect("state lock")
            .annotations
            .values()
            .cloned()
            .collect()
    }

    /// The first sample in id order this annotator has not scored yet. Every
    /// member of a group therefore walks the same sequence.
    pub fn next_task(&self, annotator: &str) -> Result<Option<String>, QualityError> {
        let state = self.state.read().expect("state lock");
        if !state.annotators.contains_key(annotator) {
            return Err(QualityError::Unregistered(annotator.to_string()));
        }
        Ok(state
            .samples
            .keys()
            .find(|s| !state.annotations.contains_key(&((*s).clone(), annotator.to_string())))
            .cloned())
    }

    pub fn consensus(&self, sample_id: &str, group_id: u32) -> Result<ConsensusScore, QualityError> {
        let state = self.state.read().expect("state lock");
        consensus_in(&state.annotations, sample_id, group_id)
    }

    /// Mean of the per-group consensus means, if any group annotated the sample.
    pub fn human_score(&self, sample_id: &str) -> Option<f64> {
        let state = self.state.read().expect("state lock");
        human_score_in(&state.annotations, sample_id)
    }

    pub fn consistency_report(&self) -> ConsistencyReport {
        let state = self.state.read().expect("state lock");
        consistency_in(&state.annotations)
    }

    pub fn export_training_set(&self, out: &Path, rounding: Rounding) -> Result<ExportReport, QualityError> {
        let store_err = |source| QualityError::Store {
            path: out.to_path_buf(),
            source,
        };
        let state = self.state.read().expect("state lock");
        let annotated: BTreeSet<&String> = state.annotations.keys().map(|(s, _)| s).collect();
        let images = out.join("images");
        fs::create_dir_all(&images).map_err(store_err)?;
        let mut report = ExportReport::default();
        let mut labels = Vec::new();
        for sample in annotated {
            let Some(score) = human_score_in(&state.annotations, sample) else {
                continue;
            };
            let Some(src) = state.samples.get(sample).cloned().flatten() else {
                report.skipped_missing_screenshot += 1;
                continue;
            };
            let file = format!("{sample}.png");
            if fs::copy(&src, images.join(&file)).is_err() {
                report.skipped_missing_screenshot += 1;
                continue;
            }
            labels.push(TrainingLabel {
                sample_id: sample.clone(),
                score: rounding.apply(score),
                image: format!("images/{file}"),
            });
        }
        report.exported = labels.len();
        crate::manifest::write_jsonl(&out.join("labels.jsonl"), &labels).map_err(|e| QualityError::Store {
            path: out.to_path_buf(),
            source: io::Error::other(e.to_string()),
        })?;
        Ok(report)
    }
}

fn consensus_in(
    annotations: &BTreeMap<(String, String), Annotation>,
    sample_id: &str,
    group_id: u32,
) -> Result<ConsensusScore, QualityError> {
    let scores: Vec<f64> = annotations
        .values()
        .filter(|a| a.sample_id == sample_id && a.group_id == group_id)
        .map(|a| a.score as f64)
        .collect();
    if scores.is_empty() {
        return Err(QualityError::NoAnnotations {
            sample_id: sample_id.to_string(),
            group_id,
        });
    }
    Ok(ConsensusScore {
        sample_id: sample_id.to_string(),
        group_id,
        mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
        annotator_count: scores.len(),
    })
}

fn human_score_in(annotations: &BTreeMap<(String, String), Annotation>, sample_id: &str) -> Option<f64> {
    let groups: BTreeSet<u32> = annotations
        .values()
        .filter(|a| a.sample_id == sample_id)
        .map(|a| a.group_id)
        .collect();
    let means: Vec<f64> = groups
        .iter()
        .filter_map(|&g| consensus_in(annotations, sample_id, g).ok())
        .map(|c| c.mean_score)
        .collect();
    (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    None,
    Nearest,
    Floor,
}

impl Rounding {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Rounding::None => v,
            Rounding::Nearest => v.round(),
            Rounding::Floor => v.floor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLabel {
    pub sample_id: String,
    pub score: f64,
    pub image: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportReport {
    pub exported: usize,
    pub skipped_missing_screenshot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSummary {
    pub group_id: u32,
    /// Count of annotations per score 0..=5.
    pub histogram: [usize; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// Consensus means binned by their integer part (5.0 lands in the last bin).
    pub consensus_histogram: [usize; 6],
    pub samples: usize,
    pub mean: f64,
    /// Population variance of the consensus means.
    pub variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub annotators: BTreeMap<String, AnnotatorSummary>,
    pub groups: BTreeMap<u32, GroupSummary>,
}

fn consistency_in(annotations: &BTreeMap<(String, String), Annotation>) -> ConsistencyReport {
    let mut report = ConsistencyReport::default();
    for a in annotations.values() {
        let s = report
            .annotators
            .entry(a.annotator_id.clone())
            .or_insert(AnnotatorSummary {
                group_id: a.group_id,
                histogram: [0; 6],
            });
        s.histogram[a.score.min(5) as usize] += 1;
    }
    let pairs: BTreeSet<(u32, &String)> = annotations.values().map(|a| (a.group_id, &a.sample_id)).collect();
    let mut by_group: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (g, s) in pairs {
        if let Ok(c) = consensus_in(annotations, s, g) {
            by_group.entry(g).or_default().push(c.mean_score);
        }
    }
    for (g, means) in by_group {
        let n = means.len() as f64;
        let mean = means.iter().sum::<f64>() / n;
        let variance = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        let mut hist = [0usize; 6];
        for m in &means {
            hist[(m.floor() as usize).min(5)] += 1;
        }
        report.groups.insert(
            g,
            GroupSummary {
                consensus_histogram: hist,
                samples: means.len(),
                mean,
                variance,
            },
        );
    }
    report
}
