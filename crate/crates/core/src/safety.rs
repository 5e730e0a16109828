//! Ethical filtering: the NSFW screenshot gate, the multilingual bad-word gate
//! over visible page text, and the threshold sweep used to pick the cut-off.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use aho_corasick::AhoCorasick;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::html::{Document, NodeData};
use crate::service::{with_retry, NsfwDetector, RetryPolicy, ServiceError};

pub const NSFW_THRESHOLD: f64 = 0.04;
/// Pages with more bad-word occurrences than this are removed.
pub const MAX_BAD_WORDS: usize = 20;
pub const MATCHED_WORDS_CAP: usize = 50;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error("word list {path}: {source}")]
    WordList {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("NSFW detector unavailable for {sample_id}: {reason}")]
    Unavailable { sample_id: String, reason: String },
    #[error("NSFW detector protocol error for {sample_id}: {reason}")]
    Protocol { sample_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyThresholds {
    pub nsfw: f64,
    pub max_bad_words: usize,
}

impl Default for SafetyThresholds {
    fn default() -> Self {
        SafetyThresholds {
            nsfw: NSFW_THRESHOLD,
            max_bad_words: MAX_BAD_WORDS,
        }
    }
}

/// Strictly-below rule. A threshold of 1.0 or more disables the gate, since
/// scores live in `[0, 1]` and a score of exactly 1.0 would otherwise still fail.
pub fn nsfw_pass(score: f64, threshold: f64) -> bool {
    threshold >= 1.0 || score < threshold
}

pub fn bad_words_pass(count: usize, max: usize) -> bool {
    count <= max
}

pub fn keep(nsfw_score: f64, bad_word_count: usize, t: &SafetyThresholds) -> bool {
    nsfw_pass(nsfw_score, t.nsfw) && bad_words_pass(bad_word_count, t.max_bad_words)
}

pub fn nsfw_gate(
    sample_id: &str,
    png: &[u8],
    detector: &dyn NsfwDetector,
    threshold: f64,
    retry: &RetryPolicy,
) -> Result<(f64, bool), SafetyError> {
    match with_retry(retry, || detector.nsfw_score(png)) {
        Ok(s) if (0.0..=1.0).contains(&s) => Ok((s, nsfw_pass(s, threshold))),
        Ok(s) => Err(SafetyError::Protocol {
            sample_id: sample_id.to_string(),
            reason: format!("score {s} outside [0, 1]"),
        }),
        Err(ServiceError::Unavailable(reason)) => Err(SafetyError::Unavailable {
            sample_id: sample_id.to_string(),
            reason,
        }),
        Err(e) => Err(SafetyError::Protocol {
            sample_id: sample_id.to_string(),
            reason: e.to_string(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub sample_id: String,
    pub nsfw_score: f64,
    pub bad_word_count: usize,
    pub keep: bool,
    pub matched_words: Vec<(String, usize)>,
}

/// Bad-word lists merged into one matcher. Entries are lowercased and
/// de-duplicated across lists so a word listed twice is not counted twice.
#[derive(Debug, Clone)]
pub struct WordLists {
    words: Vec<String>,
    /// Per word: match anywhere (scripts written without spaces) rather than on word boundaries.
    substring: Vec<bool>,
    matcher: Option<AhoCorasick>,
}

impl WordLists {
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        let words: Vec<String> = set.into_iter().collect();
        let substring = words.iter().map(|w| w.chars().any(is_unspaced_script)).collect();
        let matcher = (!words.is_empty()).then(|| AhoCorasick::new(&words).expect("word automaton"));
        WordLists {
            words,
            substring,
            matcher,
        }
    }

    /// Parses list text: one entry per line, `#` starts a comment line.
    pub fn parse(text: &str) -> Self {
        Self::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self, SafetyError> {
        let mut all = String::new();
        for p in paths {
            let p = p.as_ref();
            let text = fs::read_to_string(p).map_err(|source| SafetyError::WordList {
                path: p.to_path_buf(),
                source,
            })?;
            all.push_str(&text);
            all.push('\n');
        }
        Ok(Self::parse(&all))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Total occurrences and per-word counts (most frequent first, capped).
    pub fn count(&self, text: &str) -> (usize, Vec<(String, usize)>) {
        let Some(matcher) = &self.matcher else {
            return (0, Vec::new());
        };
        let lower = text.to_lowercase();
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for m in matcher.find_overlapping_iter(&lower) {
            let w = m.pattern().as_usize();
            if self.substring[w] || on_word_boundary(&lower, m.start(), m.end()) {
                *per.entry(w).or_default() += 1;
            }
        }
        let total = per.values().sum();
        let mut matched: Vec<(String, usize)> = per.into_iter().map(|(w, n)| (self.words[w].clone(), n)).collect();
        matched.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        matched.truncate(MATCHED_WORDS_CAP);
        (total, matched)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn on_word_boundary(text: &str, start: usize, end: usize) -> bool {
    let before = text[..start].chars().next_back();
    let after = text[end..].chars().next();
    let first = text[start..end].chars().next();
    let last = text[start..end].chars().next_back();
    // Only demand a boundary where the word itself begins or ends with a word character.
    let left_ok = !first.is_some_and(is_word_char) || !before.is_some_and(is_word_char);
    let right_ok = !last.is_some_and(is_word_char) || !after.is_some_and(is_word_char);
    left_ok && right_ok
}

/// Scripts conventionally written without spaces between words.
fn is_unspaced_script(c: char) -> bool {
    matches!(c as u32,
        0x0E00..=0x0E7F   // Thai
        | 0x0E80..=0x0EFF // Lao
        | 0x0F00..=0x0FFF // Tibetan
        | 0x1000..=0x109F // Myanmar
        | 0x1780..=0x17FF // Khmer
        | 0x3040..=0x30FF // Hiragana, Katakana
        | 0x3100..=0x312F // Bopomofo
        | 0x3400..=0x4DBF // CJK Extension A
        | 0x4E00..=0x9FFF // CJK Unified
        | 0xF900..=0xFAFF // CJK Compatibility
        | 0xFF66..=0xFF9F // Halfwidth Katakana
        | 0x20000..=0x2FFFF)
}

/// Text nodes of the body joined by single spaces; script, style and template
/// content is skipped.
pub fn visible_text(html: &str) -> String {
    let doc = Document::parse(html);
    let Some(body) = doc.body() else {
        return String::new();
    };
    let mut parts = Vec::new();
    for id in doc.descendants(body) {
        if let NodeData::Text(t) = &doc.node(id).data {
            let hidden = doc.ancestors(id).any(|a| {
                doc.element(a)
                    .is_some_and(|e| matches!(e.name.as_str(), "script" | "style" | "template" | "noscript"))
            });
            if !hidden && !t.trim().is_empty() {
                parts.push(t.trim());
            }
        }
    }
    parts.join(" ")
}

pub fn bad_word_verdict(
    sample_id: &str,
    nsfw_score: f64,
    text: &str,
    lists: &WordLists,
    t: &SafetyThresholds,
) -> SafetyVerdict {
    let (count, matched) = lists.count(text);
    SafetyVerdict {
        sample_id: sample_id.to_string(),
        nsfw_score,
        bad_word_count: count,
        keep: keep(nsfw_score, count, t),
        matched_words: matched,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSample {
    pub nsfw_score: f64,
    pub bad_word_count: usize,
    /// Manual review label, when available.
    #[serde(default)]
    pub harmful: Option<bool>,
}

/// One row in the shape of the threshold table: what the NSFW gate removes and
/// retains on its own, and what survives it jointly with the bad-word gate.
/// Ratios are percentages rounded to two decimals; label-dependent columns are
/// `None` unless every sample carries a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub total: usize,
    pub removed: usize,
    pub removed_good: Option<usize>,
    pub miskill_ratio: Option<f64>,
    pub retained: usize,
    pub retained_bad: Option<usize>,
    pub retention_ratio: f64,
    pub toxic_ratio: Option<f64>,
    pub joint_retained: usize,
    pub joint_bad: Option<usize>,
    pub joint_retention_ratio: f64,
    pub joint_toxic_ratio: Option<f64>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        return 0.0;
    }
    (num as f64 * 10000.0 / den as f64).round() / 100.0
}

pub fn threshold_sweep(samples: &[SweepSample], thresholds: &[f64], max_bad_words: usize) -> Vec<SweepRow> {
    let labelled = samples.iter().all(|s| s.harmful.is_some());
    let total = samples.len();
    thresholds
        .iter()
        .map(|&t| {
            let (mut removed, mut removed_good, mut retained, mut retained_bad) = (0, 0, 0, 0);
            let (mut joint, mut joint_bad) = (0, 0);
            for s in samples {
                let bad = s.harmful == Some(true);
                if nsfw_pass(s.nsfw_score, t) {
                    retained += 1;
                    retained_bad += bad as usize;
                    if bad_words_pass(s.bad_word_count, max_bad_words) {
                        joint += 1;
                        joint_bad += bad as usize;
                    }
                } else {
                    removed += 1;
                    removed_good += !bad as usize;
                }
            }
            let lab = |v: usize| labelled.then_some(v);
            let labp = |v: f64| labelled.then_some(v);
            SweepRow {
                threshold: t,
                total,
                removed,
                removed_good: lab(removed_good),
                miskill_ratio: labp(pct(removed_good, total)),
                retained,
                retained_bad: lab(retained_bad),
                retention_ratio: pct(retained, total),
                toxic_ratio: labp(pct(retained_bad, retained)),
                joint_retained: joint,
                joint_bad: lab(joint_bad),
                joint_retention_ratio: pct(joint, total),
                joint_toxic_ratio: labp(pct(joint_bad, joint)),
            }
        })
        .collect()
}

/// Aligned text rendering of sweep rows.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
    let optp = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}%"));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>9} {:>6} | {:>7} {:>5} {:>8} | {:>8} {:>4} {:>9} {:>7} | {:>8} {:>4} {:>9} {:>7}",
        "threshold",
        "total",
        "removed",
        "good",
        "miskill",
        "retained",
        "bad",
        "retention",
        "toxic",
        "retained",
        "bad",
        "retention",
        "toxic"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:>9.2} {:>6} | {:>7} {:>5} {:>8} | {:>8} {:>4} {:>9} {:>7} | {:>8} {:>4} {:>9} {:>7}",
            r.threshold,
            r.total,
            r.removed,
            opt(r.removed_good),
            optp(r.miskill_ratio),
            r.retained,
            opt(r.retained_bad),
            format!("{:.2}%", r.retention_ratio),
            optp(r.toxic_ratio),
            r.joint_retained,
            opt(r.joint_bad),
            format!("{:.2}%", r.joint_retention_ratio),
            optp(r.joint_toxic_ratio),
        );
    }
    out
}
