//! Dataset assembly: screenshot de-duplication, token-length partitioning into
//! train and the three test splits, and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dom::CodeStats;
use crate::exec::{self, Mode};
use crate::service::{cosine, with_retry, ImageEmbedder, RetryPolicy, ServiceError};
use crate::summary::MeanStd;

pub const SHORT_MAX_TOKENS: usize = 2048;
pub const MID_MAX_TOKENS: usize = 4096;
pub const TEST_MIN_SCORE: f64 = 4.0;
pub const PER_SPLIT: usize = 256;
pub const EMBEDDING_DUP_THRESHOLD: f64 = 0.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Short,
    Mid,
    Long,
    Excluded,
}

impl Split {
    pub const TEST: [Split; 3] = [Split::Short, Split::Mid, Split::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Short => "short",
            Split::Mid => "mid",
            Split::Long => "long",
            Split::Excluded => "excluded",
        }
    }

    /// The test split a token length falls into, if any.
    pub fn for_tokens(token_len: usize) -> Option<Split> {
        match token_len {
            0 => None,
            1..=SHORT_MAX_TOKENS => Some(Split::Short),
            n if n <= MID_MAX_TOKENS => Some(Split::Mid),
            _ => Some(Split::Long),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "short" => Ok(Split::Short),
            "mid" => Ok(Split::Mid),
            "long" => Ok(Split::Long),
            "excluded" => Ok(Split::Excluded),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub html: String,
    pub screenshot_ref: PathBuf,
    pub layout_ref: PathBuf,
    pub score: f64,
    pub token_len: usize,
    pub split: Split,
    pub stats: CodeStats,
}

/// Anything with an id and a screenshot on disk can be de-duplicated.
pub trait HasScreenshot {
    fn id(&self) -> &str;
    fn screenshot(&self) -> &Path;
}

impl HasScreenshot for DatasetEntry {
    fn id(&self) -> &str {
        &self.id
    }
    fn screenshot(&self) -> &Path {
        &self.screenshot_ref
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub input: usize,
    pub kept: usize,
    pub duplicates: usize,
    pub unreadable: usize,
    /// Entries whose embedding could not be obtained; neither kept nor dropped.
    pub parked: usize,
}

pub struct Dedup<T> {
    pub kept: Vec<T>,
    pub dropped: Vec<T>,
    pub parked: Vec<T>,
    pub report: DedupReport,
}

fn sort_by_id<T: HasScreenshot>(items: &mut [T]) {
    items.sort_by(|a, b| a.id().cmp(b.id()));
}

/// Keeps the first entry (in id order) for each distinct screenshot digest.
/// `base` resolves relative screenshot paths.
pub fn hash_dedup<T: HasScreenshot + Send + Sync>(mut items: Vec<T>, base: &Path, mode: Mode) -> Dedup<T> {
    sort_by_id(&mut items);
    let digests: Vec<Option<[u8; 32]>> = exec::map(mode, &items, |it| {
        fs::read(base.join(it.screenshot()))
            .ok()
            .map(|b| Sha256::digest(&b).into())
    });
    let mut report = DedupReport {
        input: items.len(),
        ..Default::default()
    };
    let mut seen: HashSet<[u8; 32]> = HashSet::new();
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (it, d) in items.into_iter().zip(digests) {
        match d {
            None => {
                report.unreadable += 1;
                dropped.push(it);
            }
            Some(d) if !seen.insert(d) => {
                report.duplicates += 1;
                dropped.push(it);
            }
            Some(_) => kept.push(it),
        }
    }
    report.kept = kept.len();
    Dedup {
        kept,
        dropped,
        parked: Vec::new(),
        report,
    }
}

/// Greedy scan in id order: an entry is dropped iff its embedding has cosine
/// `>= threshold` with an already retained entry.
pub fn embedding_dedup<T: HasScreenshot + Send + Sync>(
    mut items: Vec<T>,
    base: &Path,
    embedder: &dyn ImageEmbedder,
    threshold: f64,
    retry: &RetryPolicy,
    mode: Mode,
) -> Dedup<T> {
    sort_by_id(&mut items);
    let embeddings: Vec<Result<Vec<f32>, ServiceError>> = exec::map(mode, &items, |it| {
        let png = fs::read(base.join(it.screenshot())).map_err(|e| ServiceError::BadImage(e.to_string()))?;
        with_retry(retry, || embedder.embed(&png))
    });
    let mut report = DedupReport {
        input: items.len(),
        ..Default::default()
    };
    let mut retained: Vec<Vec<f32>> = Vec::new();
    let (mut kept, mut dropped, mut parked) = (Vec::new(), Vec::new(), Vec::new());
    for (it, e) in items.into_iter().zip(embeddings) {
        match e {
            Ok(v) => {
                if retained.iter().any(|r| cosine(r, &v) >= threshold) {
                    report.duplicates += 1;
                    dropped.push(it);
                } else {
                    retained.push(v);
                    kept.push(it);
                }
            }
            Err(ServiceError::Unavailable(_)) => {
                report.parked += 1;
                parked.push(it);
            }
            Err(_) => {
                report.unreadable += 1;
                dropped.push(it);
            }
        }
    }
    report.kept = kept.len();
    Dedup {
        kept,
        dropped,
        parked,
        report,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub per_split: usize,
    pub seed: u64,
    /// Test candidates need a score strictly above this.
    pub min_test_score: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            per_split: PER_SPLIT,
            seed: 17,
            min_test_score: TEST_MIN_SCORE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRange {
    pub count: usize,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub ranges: BTreeMap<Split, TokenRange>,
    pub warnings: Vec<String>,
}

impl PartitionReport {
    /// Aligned split table: count and token range per split.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:>6}  {}\n", "split", "count", "token range");
        for (split, r) in &self.ranges {
            let _ = writeln!(out, "{:<8} {:>6}  [{}, {}]", split.as_str(), r.count, r.min, r.max);
        }
        out
    }
}

/// Assigns every entry a split. Entries already marked `Excluded` stay so;
/// ids in `not_test` may only land in train. Among the remaining entries with
/// score above the minimum, `per_split` are drawn uniformly per token range
/// with a ChaCha8 stream seeded by `cfg.seed`. The result does not depend on
/// input order.
pub fn partition(entries: &mut [DatasetEntry], cfg: &PartitionConfig, not_test: &BTreeSet<String>) -> PartitionReport {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| entries[a].id.cmp(&entries[b].id));

    let mut buckets: BTreeMap<Split, Vec<usize>> = Split::TEST.iter().map(|&s| (s, Vec::new())).collect();
    for &i in &order {
        let e = &mut entries[i];
        if e.split == Split::Excluded {
            continue;
        }
        e.split = Split::Train;
        if e.score > cfg.min_test_score && !not_test.contains(&e.id) {
            if let Some(s) = Split::for_tokens(e.token_len) {
                buckets.get_mut(&s).expect("test bucket").push(i);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = PartitionReport::default();
    for (split, cands) in buckets {
        let take = cfg.per_split.min(cands.len());
        if cands.len() < cfg.per_split {
            report.warnings.push(format!(
                "{split}: only {} candidates for {} slots",
                cands.len(),
                cfg.per_split
            ));
        }
        let mut picked: Vec<usize> = sample(&mut rng, cands.len(), take)
            .into_iter()
            .map(|k| cands[k])
            .collect();
        picked.sort_unstable();
        for i in picked {
            entries[i].split = split;
        }
    }
    for e in entries.iter() {
        let r = report.ranges.entry(e.split).or_insert(TokenRange {
            count: 0,
            min: usize::MAX,
            max: 0,
        });
        r.count += 1;
        r.min = r.min.min(e.token_len);
        r.max = r.max.max(e.token_len);
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub split: String,
    pub n: usize,
    pub token_len: Option<MeanStd>,
    pub tag_count: Option<MeanStd>,
    pub dom_depth: Option<MeanStd>,
    pub unique_tag_count: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    pub rows: Vec<StatsRow>,
}

fn stats_row(name: &str, stats: &[&CodeStats]) -> StatsRow {
    let col = |f: fn(&CodeStats) -> usize| MeanStd::of(&stats.iter().map(|s| f(s) as f64).collect::<Vec<_>>());
    StatsRow {
        split: name.to_string(),
        n: stats.len(),
        token_len: col(|s| s.token_len),
        tag_count: col(|s| s.tag_count),
        dom_depth: col(|s| s.dom_depth),
        unique_tag_count: col(|s| s.unique_tag_count),
    }
}

/// Rows for the whole corpus (`all`, excluded entries left out) and then each split.
pub fn corpus_stats(entries: &[DatasetEntry]) -> StatsTable {
    let all: Vec<&CodeStats> = entries
        .iter()
        .filter(|e| e.split != Split::Excluded)
        .map(|e| &e.stats)
        .collect();
    let mut rows = vec![stats_row("all", &all)];
    for split in [Split::Train, Split::Short, Split::Mid, Split::Long] {
        let s: Vec<&CodeStats> = entries.iter().filter(|e| e.split == split).map(|e| &e.stats).collect();
        rows.push(stats_row(split.as_str(), &s));
    }
    StatsTable { rows }
}

impl StatsTable {
    fn cells(r: &StatsRow) -> [String; 4] {
        let f = |m: &Option<MeanStd>| m.map_or("n/a".to_string(), |m| m.fmt_int());
        [
            f(&r.token_len),
            f(&r.tag_count),
            f(&r.dom_depth),
            f(&r.unique_tag_count),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>6} {:>14} {:>12} {:>14} {:>16}\n",
            "split", "n", "Avg. Len", "Avg. Tags", "Avg. DOM Depth", "Avg. Unique Tags"
        );
        for r in &self.rows {
            let c = Self::cells(r);
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>14} {:>12} {:>14} {:>16}",
                r.split, r.n, c[0], c[1], c[2], c[3]
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,n,avg_len,avg_tags,avg_dom_depth,avg_unique_tags\n");
        for r in &self.rows {
            let c = Self::cells(r);
            let _ = writeln!(out, "{},{},{},{},{},{}", r.split, r.n, c[0], c[1], c[2], c[3]);
        }
        out
    }
}
