//! Design-to-code metrics: Visual Score over text blocks, whole-page
//! embedding similarity and TreeBLEU, plus the generator interface and the
//! per-split report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::RgbImage;
use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{parse_tag_tree, tree_bleu, TagTree};
use crate::layout::LayoutNode;
use crate::service::{cosine, ImageEmbedder, ServiceError};
use crate::summary::MeanStd;

pub const VISUAL_SCORE_VERSION: &str = "visual-score/v1";
/// Block pairs whose text similarity falls below this stay unmatched.
pub const TEXT_MATCH_THRESHOLD: f64 = 0.5;

/// The one-pass generation prompt, verbatim.
pub const GENERATION_PROMPT: &str = include_str!("../assets/generation_prompt.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub text: String,
    /// `[x, y, w, h]` relative to the full page, each in `[0, 1]`.
    pub bbox: [f64; 4],
    pub color: [u8; 3],
    /// Pixel rectangle `[x, y, w, h]` in the screenshot.
    pub crop: [u32; 4],
}

impl Block {
    fn center(&self) -> (f64, f64) {
        (self.bbox[0] + self.bbox[2] / 2.0, self.bbox[1] + self.bbox[3] / 2.0)
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One block per element that directly holds non-whitespace text, in
/// document order. Missing colours read as black.
pub fn extract_blocks(layout: &LayoutNode, page_size: [f64; 2]) -> Vec<Block> {
    let (pw, ph) = (page_size[0].max(1.0), page_size[1].max(1.0));
    layout
        .walk()
        .into_iter()
        .filter_map(|n| {
            let text = collapse_ws(&n.text);
            if text.is_empty() {
                return None;
            }
            let [x, y, w, h] = n.bbox;
            let px = |v: f64| v.max(0.0).round() as u32;
            Some(Block {
                text,
                bbox: [
                    (x / pw).clamp(0.0, 1.0),
                    (y / ph).clamp(0.0, 1.0),
                    (w / pw).clamp(0.0, 1.0),
                    (h / ph).clamp(0.0, 1.0),
                ],
                color: n.color.unwrap_or([0, 0, 0]),
                crop: [px(x), px(y), px(w), px(h)],
            })
        })
        .collect()
}

/// Normalized character-level edit similarity.
pub fn text_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

pub fn color_similarity(a: [u8; 3], b: [u8; 3]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    (1.0 - d / (255.0 * 3f64.sqrt())).clamp(0.0, 1.0)
}

pub fn position_similarity(a: &Block, b: &Block) -> f64 {
    let ((ax, ay), (bx, by)) = (a.center(), b.center());
    (1.0 - ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt() / 2f64.sqrt()).clamp(0.0, 1.0)
}

const SIM_SCALE: f64 = 1e6;
const TIE_SCALE: f64 = 999.0;

/// Optimal one-to-one matching maximizing total text similarity. Position
/// similarity only breaks ties (it is weighted below the similarity's 1e-6
/// quantum). Returns `(ref_index, cand_index, text_sim)` sorted by ref index.
pub fn match_blocks(reference: &[Block], candidate: &[Block]) -> Vec<(usize, usize, f64)> {
    if reference.is_empty() || candidate.is_empty() {
        return Vec::new();
    }
    let transpose = reference.len() > candidate.len();
    let (rows, cols) = if transpose {
        (candidate, reference)
    } else {
        (reference, candidate)
    };
    let sims: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| cols.iter().map(|c| text_similarity(&r.text, &c.text)).collect())
        .collect();
    let weights = Matrix::from_rows(rows.iter().enumerate().map(|(i, r)| {
        cols.iter()
            .enumerate()
            .map(|(j, c)| {
                let s = sims[i][j];
                if s < TEXT_MATCH_THRESHOLD {
                    0i64
                } else {
                    (s * SIM_SCALE).round() as i64 * 1000 + (position_similarity(r, c) * TIE_SCALE).round() as i64
                }
            })
            .collect::<Vec<_>>()
    }))
    .expect("rectangular weight matrix");
    let (_, assignment) = kuhn_munkres(&weights);
    let mut pairs: Vec<(usize, usize, f64)> = assignment
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| sims[i][j] >= TEXT_MATCH_THRESHOLD)
        .map(|(i, j)| {
            if transpose {
                (j, i, sims[i][j])
            } else {
                (i, j, sims[i][j])
            }
        })
        .collect();
    pairs.sort_by_key(|p| p.0);
    pairs
}

#[derive(Debug, Error)]
pub enum VisualError {
    #[error("reference has no text blocks")]
    NoReferenceBlocks,
    #[error(transparent)]
    Service(#[from] ServiceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualScore {
    pub score: f64,
    pub match_ratio: f64,
    pub text: f64,
    pub color: f64,
    pub position: f64,
    pub clip: f64,
    pub matched: usize,
    pub version: String,
}

/// A rendered page as the metrics see it.
pub struct RenderedPage<'a> {
    pub blocks: &'a [Block],
    pub image: &'a RgbImage,
}

fn crop(img: &RgbImage, r: [u32; 4]) -> RgbImage {
    let (iw, ih) = img.dimensions();
    if iw == 0 || ih == 0 {
        return RgbImage::new(1, 1);
    }
    let x = r[0].min(iw - 1);
    let y = r[1].min(ih - 1);
    let w = r[2].clamp(1, iw - x);
    let h = r[3].clamp(1, ih - y);
    image::imageops::crop_imm(img, x, y, w, h).to_image()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean of match ratio and the four per-pair sub-scores averaged over the
/// matched pairs. With no matched pairs the pair sub-scores are 0.
pub fn visual_score(
    reference: &RenderedPage<'_>,
    candidate: &RenderedPage<'_>,
    embedder: &dyn ImageEmbedder,
) -> Result<VisualScore, VisualError> {
    if reference.blocks.is_empty() {
        return Err(VisualError::NoReferenceBlocks);
    }
    let pairs = match_blocks(reference.blocks, candidate.blocks);
    let (mut text, mut color, mut pos, mut clip) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &(i, j, s) in &pairs {
        let (r, c) = (&reference.blocks[i], &candidate.blocks[j]);
        text.push(s);
        color.push(color_similarity(r.color, c.color));
        pos.push(position_similarity(r, c));
        let er = embedder.embed_image(&crop(reference.image, r.crop))?;
        let ec = embedder.embed_image(&crop(candidate.image, c.crop))?;
        clip.push(cosine(&er, &ec).max(0.0));
    }
    let match_ratio = 2.0 * pairs.len() as f64 / (reference.blocks.len() + candidate.blocks.len()) as f64;
    let (text, color, position, clip) = (mean(&text), mean(&color), mean(&pos), mean(&clip));
    Ok(VisualScore {
        score: (match_ratio + text + color + position + clip) / 5.0,
        match_ratio,
        text,
        color,
        position,
        clip,
        matched: pairs.len(),
        version: VISUAL_SCORE_VERSION.to_string(),
    })
}

/// Whole-page embedding cosine, clamped to `[0, 1]` for reporting.
pub fn clip_similarity(a: &RgbImage, b: &RgbImage, embedder: &dyn ImageEmbedder) -> Result<f64, ServiceError> {
    Ok(cosine(&embedder.embed_image(a)?, &embedder.embed_image(b)?).clamp(0.0, 1.0))
}

/// Everything needed to score one page: its source and its render.
pub struct PageArtifacts<'a> {
    pub html: &'a str,
    pub layout: &'a LayoutNode,
    pub page_size: [f64; 2],
    pub image: &'a RgbImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub visual: Option<f64>,
    pub clip: Option<f64>,
    pub treebleu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_detail: Option<VisualScore>,
    /// Metric-level problems; the sample still counts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// Set when the sample could not be evaluated at all (generation refused,
    /// candidate unrenderable); such samples are left out of aggregates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl SampleMetrics {
    pub fn failed(id: impl Into<String>, reason: impl Into<String>) -> Self {
        SampleMetrics {
            id: id.into(),
            visual: None,
            clip: None,
            treebleu: None,
            visual_detail: None,
            flags: Vec::new(),
            failure: Some(reason.into()),
        }
    }
}

fn tree_of(html: &str) -> Option<TagTree> {
    parse_tag_tree(html).ok()
}

pub fn evaluate_sample(
    id: &str,
    reference: &PageArtifacts<'_>,
    candidate: &PageArtifacts<'_>,
    embedder: &dyn ImageEmbedder,
) -> SampleMetrics {
    let mut m = SampleMetrics {
        id: id.to_string(),
        visual: None,
        clip: None,
        treebleu: None,
        visual_detail: None,
        flags: Vec::new(),
        failure: None,
    };
    match (tree_of(candidate.html), tree_of(reference.html)) {
        (Some(c), Some(r)) => m.treebleu = Some(tree_bleu(&c, &r)),
        _ => m.flags.push("treebleu: unparsable html".into()),
    }
    let rb = extract_blocks(reference.layout, reference.page_size);
    let cb = extract_blocks(candidate.layout, candidate.page_size);
    let (rp, cp) = (
        RenderedPage {
            blocks: &rb,
            image: reference.image,
        },
        RenderedPage {
            blocks: &cb,
            image: candidate.image,
        },
    );
    match visual_score(&rp, &cp, embedder) {
        Ok(v) => {
            m.visual = Some(v.score);
            m.visual_detail = Some(v);
        }
        Err(e) => m.flags.push(format!("visual: {e}")),
    }
    match clip_similarity(reference.image, candidate.image, embedder) {
        Ok(c) => m.clip = Some(c),
        Err(e) => m.flags.push(format!("clip: {e}")),
    }
    m
}

pub const METRICS: [&str; 3] = ["visual", "clip", "treebleu"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_name: String,
    pub split_name: String,
    pub metric_version: String,
    pub per_sample: Vec<SampleMetrics>,
    /// Keyed by metric name; a metric with no values is absent.
    pub aggregate: BTreeMap<String, MeanStd>,
    pub excluded: usize,
}

fn aggregate(per_sample: &[SampleMetrics]) -> (BTreeMap<String, MeanStd>, usize) {
    let ok: Vec<&SampleMetrics> = per_sample.iter().filter(|s| s.failure.is_none()).collect();
    let mut agg = BTreeMap::new();
    for name in METRICS {
        let vals: Vec<f64> = ok
            .iter()
            .filter_map(|s| match name {
                "visual" => s.visual,
                "clip" => s.clip,
                _ => s.treebleu,
            })
            .collect();
        if let Some(ms) = MeanStd::of(&vals) {
            agg.insert(name.to_string(), ms);
        }
    }
    (agg, per_sample.len() - ok.len())
}

impl MetricReport {
    /// Rows are sorted by id so the aggregate does not depend on the order
    /// samples finished in.
    pub fn new(model_name: &str, split_name: &str, mut per_sample: Vec<SampleMetrics>) -> Self {
        per_sample.sort_by(|a, b| a.id.cmp(&b.id));
        let (aggregate, excluded) = aggregate(&per_sample);
        MetricReport {
            model_name: model_name.to_string(),
            split_name: split_name.to_string(),
            metric_version: VISUAL_SCORE_VERSION.to_string(),
            per_sample,
            aggregate,
            excluded,
        }
    }

    /// True iff the stored aggregate equals one recomputed from the rows.
    pub fn is_consistent(&self) -> bool {
        aggregate(&self.per_sample) == (self.aggregate.clone(), self.excluded)
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("id,visual,clip,treebleu,failure\n");
        for s in &self.per_sample {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.id,
                cell(s.visual),
                cell(s.clip),
                cell(s.treebleu),
                s.failure.as_deref().unwrap_or("").replace([',', '\n'], " ")
            );
        }
        out
    }

    /// One line per model: mean±std for each metric.
    pub fn summary_line(&self) -> String {
        let cell = |k: &str| self.aggregate.get(k).map_or("n/a".to_string(), MeanStd::fmt_2);
        format!(
            "{} [{}] visual {} clip {} treebleu {} (excluded {})",
            self.model_name,
            self.split_name,
            cell("visual"),
            cell("clip"),
            cell("treebleu"),
            self.excluded
        )
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeneratorError {
    /// The model declined or answered with nothing usable; this sample fails.
    #[error("generation refused: {0}")]
    Refused(String),
    /// Transport trouble that outlived retries; this sample fails.
    #[error("generator unavailable: {0}")]
    Unavailable(String),
    /// Authentication or quota; the whole run stops and can be resumed.
    #[error("generator fatal error: {0}")]
    Fatal(String),
}

pub struct GenerationRequest<'a> {
    pub id: &'a str,
    pub screenshot_png: &'a [u8],
    pub prompt: &'a str,
    /// Only oracle generators may look at this.
    pub reference_html: &'a str,
}

pub trait Generator: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<String, GeneratorError>;
}

/// Returns the reference verbatim; every metric should come out at 1.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoGenerator;

impl Generator for EchoGenerator {
    fn name(&self) -> &str {
        "echo"
    }
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        Ok(req.reference_html.to_string())
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct EmptyGenerator;

impl Generator for EmptyGenerator {
    fn name(&self) -> &str {
        "empty"
    }
    fn generate(&self, _: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        Ok("<html></html>".to_string())
    }
}

/// Extracts the body of the first markdown code fence, or returns the trimmed
/// text when there is none.
pub fn strip_fences(text: &str) -> String {
    let Some(start) = text.find("```") else {
        return text.trim().to_string();
    };
    let after = &text[start + 3..];
    let body = match after.find('\n') {
        Some(nl) if !after[..nl].contains('<') => &after[nl + 1..],
        _ => after,
    };
    let body = match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    };
    body.trim().to_string()
}
