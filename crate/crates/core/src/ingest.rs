//! Turning WARC archives and plain directories into [`RawPage`] records.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use encoding_rs::{Encoding, UTF_8};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::Url;
use walkdir::WalkDir;

use crate::html::{Document, NodeData};
use crate::warc::{self, WarcError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CssOrigin {
    InlineStyleTag,
    ExternalFile,
    StyleAttribute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CssSource {
    pub origin: CssOrigin,
    pub text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub unresolved: bool,
}

impl CssSource {
    pub fn new(origin: CssOrigin, text: impl Into<String>) -> Self {
        CssSource {
            origin,
            text: text.into(),
            unresolved: false,
        }
    }

    pub fn unresolved() -> Self {
        CssSource {
            origin: CssOrigin::ExternalFile,
            text: String::new(),
            unresolved: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPage {
    pub id: String,
    pub url: String,
    pub html: String,
    pub css_sources: Vec<CssSource>,
    /// UTC seconds.
    pub fetched_at: i64,
}

impl RawPage {
    pub fn new(url: impl Into<String>, html: impl Into<String>, css_sources: Vec<CssSource>, fetched_at: i64) -> Self {
        let url = url.into();
        let html = html.into();
        RawPage {
            id: page_id(&url, &html),
            url,
            html,
            css_sources,
            fetched_at,
        }
    }

    /// Builds a page whose `<link>` stylesheets are all left unresolved.
    pub fn from_html(url: impl Into<String>, html: impl Into<String>, fetched_at: i64) -> Self {
        let url = url.into();
        let html = html.into();
        let css = collect_css(&Document::parse(&html), &url, &mut |_| None);
        RawPage::new(url, html, css, fetched_at)
    }

    /// All CSS text in source order, as measured by the length gate.
    pub fn css_concat(&self) -> String {
        self.css_sources.iter().map(|s| s.text.as_str()).collect()
    }
}

/// Hex of the first 16 bytes of SHA-256(url ++ html).
pub fn page_id(url: &str, html: &str) -> String {
    let mut h = Sha256::new();
    h.update(url.as_bytes());
    h.update(html.as_bytes());
    hex::encode(&h.finalize()[..16])
}

/// Skipped inputs tallied by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport(pub BTreeMap<String, usize>);

impl SkipReport {
    pub fn add(&mut self, reason: &str) {
        *self.0.entry(reason.to_string()).or_default() += 1;
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn merge(&mut self, other: SkipReport) {
        for (k, v) in other.0 {
            *self.0.entry(k).or_default() += v;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutput {
    pub pages: Vec<RawPage>,
    pub skipped: SkipReport,
}

/// Decodes page bytes: BOM, then the declared charset, then a `<meta>` prescan,
/// then lossy UTF-8.
pub fn decode_html(bytes: &[u8], declared: Option<&str>) -> String {
    if let Some((enc, bom_len)) = Encoding::for_bom(bytes) {
        return enc.decode_without_bom_handling(&bytes[bom_len..]).0.into_owned();
    }
    let enc = declared
        .and_then(|l| Encoding::for_label(l.trim().as_bytes()))
        .or_else(|| meta_charset(bytes))
        .unwrap_or(UTF_8);
    enc.decode_without_bom_handling(bytes).0.into_owned()
}

fn meta_charset(bytes: &[u8]) -> Option<&'static Encoding> {
    let head = &bytes[..bytes.len().min(1024)];
    let lower: Vec<u8> = head.to_ascii_lowercase();
    let mut from = 0;
    while let Some(off) = find(&lower[from..], b"<meta") {
        let start = from + off;
        let end = find(&lower[start..], b">").map_or(lower.len(), |e| start + e);
        let tag = &lower[start..end];
        if let Some(c) = find(tag, b"charset") {
            let rest = &tag[c + 7..];
            let rest = rest.trim_ascii_start();
            if let Some(rest) = rest.strip_prefix(b"=") {
                let rest = rest.trim_ascii_start();
                let rest = rest
                    .strip_prefix(b"\"")
                    .or_else(|| rest.strip_prefix(b"'"))
                    .unwrap_or(rest);
                let label: Vec<u8> = rest
                    .iter()
                    .copied()
                    .take_while(|b| b.is_ascii_alphanumeric() || b"-_:.".contains(b))
                    .collect();
                if let Some(enc) = Encoding::for_label(&label) {
                    // A meta declaration of UTF-16 cannot be true for ASCII-compatible bytes.
                    return Some(if enc == encoding_rs::UTF_16LE || enc == encoding_rs::UTF_16BE {
                        UTF_8
                    } else {
                        enc
                    });
                }
            }
        }
        from = end.max(start + 1);
    }
    None
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

/// Collects CSS in document order. `resolve` receives the absolute URL of each
/// `<link rel=stylesheet>` and returns its text when available.
pub fn collect_css(doc: &Document, page_url: &str, resolve: &mut dyn FnMut(&Url) -> Option<String>) -> Vec<CssSource> {
    let mut base = Url::parse(page_url).ok();
    if let Some(href) = doc
        .elements()
        .into_iter()
        .filter_map(|id| doc.element(id))
        .find(|e| e.is_html("base"))
        .and_then(|e| e.attr("href"))
    {
        if let Some(b) = base
            .as_ref()
            .and_then(|b| b.join(href.trim()).ok())
            .or_else(|| Url::parse(href.trim()).ok())
        {
            base = Some(b);
        }
    }

    let mut out = Vec::new();
    for id in doc.elements() {
        let el = doc.element(id).expect("element id");
        if el.name == "style" {
            let text: String = doc
                .children(id)
                .iter()
                .filter_map(|&c| match &doc.node(c).data {
                    NodeData::Text(t) => Some(t.as_str()),
                    _ => None,
                })
                .collect();
            out.push(CssSource::new(CssOrigin::InlineStyleTag, text));
        } else if el.is_html("link") && is_stylesheet_link(el.attr("rel")) {
            let target = el.attr("href").and_then(|h| {
                let h = h.trim();
                match &base {
                    Some(b) => b.join(h).ok(),
                    None => Url::parse(h).ok(),
                }
            });
            match target.as_ref().and_then(&mut *resolve) {
                Some(text) => out.push(CssSource::new(CssOrigin::ExternalFile, text)),
                None => out.push(CssSource::unresolved()),
            }
        }
        if let Some(style) = el.attr("style") {
            if !style.trim().is_empty() {
                out.push(CssSource::new(CssOrigin::StyleAttribute, style));
            }
        }
    }
    out
}

fn is_stylesheet_link(rel: Option<&str>) -> bool {
    rel.is_some_and(|r| r.split_ascii_whitespace().any(|t| t.eq_ignore_ascii_case("stylesheet")))
}

fn decode_css(bytes: &[u8]) -> String {
    UTF_8.decode(bytes).0.into_owned()
}

fn mtime_secs(path: &Path) -> i64 {
    fs::metadata(path)
        .and_then(|m| m.modified())
        .ok()
        .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_secs() as i64)
}

/// Every `*.html`/`*.htm` under `root`, in lexicographic path order. Pages get
/// a synthetic `file:///<relative path>` URL.
pub fn ingest_dir(root: &Path) -> Result<IngestOutput, IngestError> {
    let meta = fs::metadata(root).map_err(|source| IngestError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    if !meta.is_dir() {
        return Err(IngestError::NotADirectory(root.to_path_buf()));
    }
    let mut out = IngestOutput::default();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) if e.depth() == 0 => {
                return Err(IngestError::Io {
                    path: root.to_path_buf(),
                    source: e.into(),
                })
            }
            Err(_) => {
                out.skipped.add("unreadable");
                continue;
            }
        };
        if !entry.file_type().is_file() || !is_html_path(entry.path()) {
            continue;
        }
        let path = entry.path();
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(_) => {
                out.skipped.add("unreadable");
                continue;
            }
        };
        let html = decode_html(&bytes, None);
        if html.is_empty() {
            out.skipped.add("empty");
            continue;
        }
        let rel = path.strip_prefix(root).unwrap_or(path);
        let url = synthetic_url(rel);

        let stem_css = path.with_extension("css");
        let mut linked_stem = false;
        let mut resolve = |u: &Url| -> Option<String> {
            let p = local_path(root, u)?;
            if p == stem_css {
                linked_stem = true;
            }
            fs::read(&p).ok().map(|b| decode_css(&b))
        };
        let doc = Document::parse(&html);
        let mut css = collect_css(&doc, &url, &mut resolve);
        if !linked_stem && stem_css.is_file() {
            if let Ok(b) = fs::read(&stem_css) {
                css.insert(0, CssSource::new(CssOrigin::ExternalFile, decode_css(&b)));
            }
        }
        out.pages.push(RawPage::new(url, html, css, mtime_secs(path)));
    }
    Ok(out)
}

fn synthetic_url(rel: &Path) -> String {
    let mut u = Url::parse("file:///").expect("static url");
    if let Ok(mut segs) = u.path_segments_mut() {
        segs.clear();
        for c in rel.components() {
            segs.push(&c.as_os_str().to_string_lossy());
        }
    }
    u.to_string()
}

fn is_html_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("html") || e.eq_ignore_ascii_case("htm"))
}

/// Maps a `file:` URL under the synthetic root back to a real path.
fn local_path(root: &Path, u: &Url) -> Option<PathBuf> {
    if u.scheme() != "file" {
        return None;
    }
    let mut p = root.to_path_buf();
    for seg in u.path_segments()? {
        let seg = percent_decode(seg);
        if seg.is_empty() || seg == "." || seg == ".." {
            continue;
        }
        p.push(seg);
    }
    Some(p)
}

fn percent_decode(s: &str) -> String {
    percent_encoding::percent_decode_str(s).decode_utf8_lossy().into_owned()
}

fn is_html_mime(m: &str) -> bool {
    m == "text/html" || m == "application/xhtml+xml"
}

struct HtmlRecord {
    url: String,
    body: Vec<u8>,
    charset: Option<String>,
    fetched_at: i64,
}

/// Reads a WARC file (plain or gzip). Stylesheets are resolved from `text/css`
/// records of the same archive, then from the archive's sibling directory.
pub fn ingest_warc(path: &Path, limit: Option<usize>) -> Result<IngestOutput, IngestError> {
    let reader = warc::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut skipped = SkipReport::default();
    let mut css_by_url: HashMap<String, String> = HashMap::new();
    let mut pages: Vec<HtmlRecord> = Vec::new();

    for rec in reader {
        let rec = match rec {
            Ok(r) => r,
            Err(WarcError::Malformed(reason)) => {
                log::warn!("{}: skipping malformed WARC record: {reason}", path.display());
                skipped.add("malformed");
                continue;
            }
            Err(WarcError::Io(_)) => {
                skipped.add("malformed");
                continue;
            }
        };
        let kind = rec.record_type().unwrap_or("").to_ascii_lowercase();
        let Some(uri) = rec.target_uri().map(str::to_string) else {
            continue;
        };
        let fetched_at = rec
            .header("WARC-Date")
            .and_then(|d| chrono::DateTime::parse_from_rfc3339(d.trim()).ok())
            .map_or(0, |d| d.timestamp());
        let (status, mime, charset, body) = match kind.as_str() {
            "response" => {
                if !rec
                    .header("Content-Type")
                    .is_some_and(|c| c.to_ascii_lowercase().starts_with("application/http"))
                {
                    skipped.add("malformed");
                    continue;
                }
                match warc::parse_http_response(&rec.block) {
                    Some(r) => (r.status, r.mime().unwrap_or_default(), r.charset(), r.body),
                    None => {
                        skipped.add("malformed");
                        continue;
                    }
                }
            }
            "resource" => {
                let ct = rec.header("Content-Type").unwrap_or("");
                (200, warc::mime_of(ct), warc::charset_param(ct), rec.block)
            }
            _ => continue,
        };
        if mime == "text/css" && (200..300).contains(&status) {
            css_by_url.insert(normalize_url(&uri), decode_css(&body));
            continue;
        }
        if !is_html_mime(&mime) {
            skipped.add("non_html");
            continue;
        }
        if !(200..300).contains(&status) {
            skipped.add("http_status");
            continue;
        }
        if body.is_empty() {
            skipped.add("empty");
            continue;
        }
        pages.push(HtmlRecord {
            url: uri,
            body,
            charset,
            fetched_at,
        });
    }

    let sibling_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = IngestOutput {
        pages: Vec::new(),
        skipped,
    };
    for rec in pages.into_iter().take(limit.unwrap_or(usize::MAX)) {
        let html = decode_html(&rec.body, rec.charset.as_deref());
        let doc = Document::parse(&html);
        let mut resolve = |u: &Url| -> Option<String> {
            if let Some(text) = css_by_url.get(&normalize_url(u.as_str())) {
                return Some(text.clone());
            }
            sibling_candidates(&sibling_dir, u)
                .into_iter()
                .find_map(|p| fs::read(p).ok())
                .map(|b| decode_css(&b))
        };
        let css = collect_css(&doc, &rec.url, &mut resolve);
        out.pages.push(RawPage::new(rec.url, html, css, rec.fetched_at));
    }
    Ok(out)
}

fn normalize_url(u: &str) -> String {
    match Url::parse(u) {
        Ok(mut url) => {
            url.set_fragment(None);
            url.to_string()
        }
        Err(_) => u.to_string(),
    }
}

/// `<dir>/<host>/<path>` then `<dir>/<file name>`.
fn sibling_candidates(dir: &Path, u: &Url) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let segs: Vec<String> = u
        .path_segments()
        .map(|s| {
            s.map(percent_decode)
                .filter(|s| !s.is_empty() && s != "." && s != "..")
                .collect()
        })
        .unwrap_or_default();
    if segs.is_empty() {
        return out;
    }
    if let Some(host) = u.host_str() {
        let mut p = dir.join(host);
        p.extend(&segs);
        out.push(p);
    }
    out.push(dir.join(segs.last().unwrap()));
    out
}
