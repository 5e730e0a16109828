//! Code purification: the quick length gate, removal of redundant elements,
//! attribute whitelisting, dead-CSS pruning and merging all CSS into one
//! `<style>` element.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::css::{self, CssItem, Declaration, Stylesheet};
use crate::exec::{self, Mode};
use crate::html::{Document, NodeData, NodeId};
use crate::ingest::{CssOrigin, RawPage};
use crate::selector::{SelectorList, Specificity};

pub const ALLOWED_ATTRIBUTES: [&str; 6] = ["class", "id", "width", "height", "style", "src"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PurifyError {
    #[error("page {id} has no elements to purify")]
    EmptyDocument { id: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid range {0:?}: expected MIN:MAX with MIN <= MAX")]
pub struct RangeError(pub String);

/// Inclusive character-count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct CharRange {
    min: usize,
    max: usize,
}

impl CharRange {
    pub fn new(min: usize, max: usize) -> Result<Self, RangeError> {
        if min > max {
            return Err(RangeError(format!("{min}:{max}")));
        }
        Ok(CharRange { min, max })
    }

    pub fn min(&self) -> usize {
        self.min
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn contains(&self, n: usize) -> bool {
        (self.min..=self.max).contains(&n)
    }
}

impl TryFrom<[usize; 2]> for CharRange {
    type Error = RangeError;
    fn try_from(v: [usize; 2]) -> Result<Self, RangeError> {
        CharRange::new(v[0], v[1])
    }
}

impl From<CharRange> for [usize; 2] {
    fn from(r: CharRange) -> Self {
        [r.min, r.max]
    }
}

impl FromStr for CharRange {
    type Err = RangeError;
    fn from_str(s: &str) -> Result<Self, RangeError> {
        let err = || RangeError(s.to_string());
        let (a, b) = s.split_once(':').ok_or_else(err)?;
        let a = a.trim().parse().map_err(|_| err())?;
        let b = b.trim().parse().map_err(|_| err())?;
        CharRange::new(a, b).map_err(|_| err())
    }
}

impl fmt::Display for CharRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthGate {
    pub html_range: CharRange,
    pub css_range: CharRange,
}

/// Token budgets 128, 2048 and 4096 at roughly five characters per token.
const CHARS_PER_TOKEN: usize = 5;

impl Default for LengthGate {
    fn default() -> Self {
        LengthGate {
            html_range: CharRange::new(128 * CHARS_PER_TOKEN, 2048 * CHARS_PER_TOKEN).unwrap(),
            css_range: CharRange::new(128 * CHARS_PER_TOKEN, 4096 * CHARS_PER_TOKEN).unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthVerdict {
    pub pass: bool,
    pub html_len: usize,
    pub css_len: usize,
}

pub fn length_filter(page: &RawPage, gate: &LengthGate) -> LengthVerdict {
    let html_len = page.html.chars().count();
    let css_len: usize = page.css_sources.iter().map(|s| s.text.chars().count()).sum();
    LengthVerdict {
        pass: gate.html_range.contains(html_len) && gate.css_range.contains(css_len),
        html_len,
        css_len,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanseConfig {
    /// Absolutely positioned boxes placed entirely outside this area are hidden.
    pub viewport_width: f64,
    pub viewport_height: f64,
}

impl Default for CleanseConfig {
    fn default() -> Self {
        CleanseConfig {
            viewport_width: 1280.0,
            viewport_height: 10000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedReport {
    pub comments: usize,
    pub meta: usize,
    pub script: usize,
    pub hidden: usize,
    pub attributes: usize,
    pub dead_css_rules: usize,
    /// External stylesheets that could not be fetched at ingest time.
    #[serde(default)]
    pub unresolved_css: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PurifiedPage {
    pub id: String,
    pub html: String,
    pub removed_report: RemovedReport,
    pub html_char_len: usize,
    pub css_char_len: usize,
}

pub fn cleanse(page: &RawPage) -> Result<PurifiedPage, PurifyError> {
    cleanse_with(page, &CleanseConfig::default())
}

pub fn cleanse_batch(pages: &[RawPage], cfg: &CleanseConfig, mode: Mode) -> Vec<Result<PurifiedPage, PurifyError>> {
    exec::map(mode, pages, |p| cleanse_with(p, cfg))
}

pub fn cleanse_with(page: &RawPage, cfg: &CleanseConfig) -> Result<PurifiedPage, PurifyError> {
    if !crate::html::has_start_tag(&page.html) {
        return Err(PurifyError::EmptyDocument { id: page.id.clone() });
    }
    let mut report = RemovedReport {
        unresolved_css: page.css_sources.iter().filter(|s| s.unresolved).count(),
        ..Default::default()
    };
    let css_text: Vec<&str> = page
        .css_sources
        .iter()
        .filter(|s| s.origin != CssOrigin::StyleAttribute && !s.unresolved)
        .map(|s| s.text.as_str())
        .collect();
    let mut sheet = Stylesheet::parse(&css_text.join("\n"));

    let mut doc = Document::parse(&page.html);

    for id in all_nodes(&doc) {
        if matches!(doc.node(id).data, NodeData::Comment(_)) {
            doc.detach(id);
            report.comments += 1;
        }
    }
    for id in all_nodes(&doc) {
        let Some(el) = doc.element(id) else { continue };
        match el.name.as_str() {
            "meta" => {
                doc.detach(id);
                report.meta += 1;
            }
            "script" => {
                doc.detach(id);
                report.script += 1;
            }
            // Their CSS is already in `sheet` and is merged below.
            "style" => doc.detach(id),
            "link" if el.is_html("link") => doc.detach(id),
            _ => {}
        }
    }

    let hidden = find_hidden(&doc, &sheet, cfg);
    report.hidden = hidden.len();
    for id in hidden {
        doc.detach(id);
    }

    for id in all_nodes(&doc) {
        if let Some(el) = doc.element_mut(id) {
            let before = el.attrs.len();
            el.attrs
                .retain(|a| ALLOWED_ATTRIBUTES.iter().any(|n| a.name.eq_ignore_ascii_case(n)));
            report.attributes += before - el.attrs.len();
        }
    }

    let style = doc.create_html_element("style");
    let head = doc.head().or_else(|| doc.document_element());
    if let Some(head) = head {
        doc.append_child(head, style);
    }
    report.dead_css_rules = prune_dead_css(&mut sheet, &doc);
    let merged = escape_style_text(&sheet.to_css());
    if !merged.is_empty() {
        let text = doc.create(NodeData::Text(merged));
        doc.append_child(style, text);
    }

    Ok(PurifiedPage {
        id: page.id.clone(),
        html: doc.to_html(),
        removed_report: report,
        html_char_len: page.html.chars().count(),
        css_char_len: page.css_sources.iter().map(|s| s.text.chars().count()).sum(),
    })
}

/// Pre-order ids including `<template>` contents.
fn all_nodes(doc: &Document) -> Vec<NodeId> {
    let mut out = Vec::new();
    let mut stack = vec![doc.root()];
    while let Some(id) = stack.pop() {
        out.push(id);
        if let Some(frag) = doc.element(id).and_then(|e| e.template_contents) {
            stack.push(frag);
        }
        stack.extend(doc.children(id).iter().rev().copied());
    }
    out
}

/// A literal `</style` would end the element early when re-parsed.
fn escape_style_text(css: &str) -> String {
    let lower = css.to_ascii_lowercase();
    if !lower.contains("</style") {
        return css.to_string();
    }
    let mut out = String::with_capacity(css.len() + 4);
    let mut last = 0;
    for (i, _) in lower.match_indices("</style") {
        out.push_str(&css[last..i]);
        out.push_str("<\\/");
        last = i + 2;
    }
    out.push_str(&css[last..]);
    out
}

const CASCADE_PROPS: [&str; 9] = [
    "display",
    "visibility",
    "position",
    "left",
    "top",
    "right",
    "bottom",
    "width",
    "height",
];

/// Rules from the top level of the sheet that set any property the hidden
/// check looks at. Rules under `@media` and friends are conditional, so they
/// are not used to hide anything.
struct Cascade {
    rules: Vec<(SelectorList, Vec<Declaration>)>,
}

/// Cascade precedence: important, from a style attribute, specificity, source order.
type Precedence = (bool, bool, Specificity, usize);

#[derive(Default)]
struct Computed {
    values: Vec<(String, String, Precedence)>,
}

impl Computed {
    fn offer(&mut self, d: &Declaration, key: Precedence) {
        if !CASCADE_PROPS.contains(&d.name.as_str()) {
            return;
        }
        match self.values.iter_mut().find(|(n, _, _)| *n == d.name) {
            Some(slot) if slot.2 <= key => {
                slot.1 = d.value.to_ascii_lowercase();
                slot.2 = key;
            }
            Some(_) => {}
            None => self.values.push((d.name.clone(), d.value.to_ascii_lowercase(), key)),
        }
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, _)| v.as_str())
    }

    fn px(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(css::length_px)
    }
}

impl Cascade {
    fn new(sheet: &Stylesheet) -> Cascade {
        let rules = sheet
            .items
            .iter()
            .filter_map(|item| match item {
                CssItem::Style(r) => Some(r),
                _ => None,
            })
            .filter_map(|r| {
                let decls: Vec<Declaration> = css::parse_declarations(&r.body)
                    .into_iter()
                    .filter(|d| CASCADE_PROPS.contains(&d.name.as_str()))
                    .collect();
                if decls.is_empty() {
                    return None;
                }
                SelectorList::parse(&r.selector).ok().map(|s| (s, decls))
            })
            .collect();
        Cascade { rules }
    }

    fn compute(&self, doc: &Document, id: NodeId) -> Computed {
        let mut c = Computed::default();
        for (order, (sel, decls)) in self.rules.iter().enumerate() {
            if let Some(spec) = sel.match_specificity(doc, id) {
                for d in decls {
                    c.offer(d, (d.important, false, spec, order));
                }
            }
        }
        if let Some(style) = doc.element(id).and_then(|e| e.attr("style")) {
            for d in css::parse_declarations(style) {
                c.offer(&d, (d.important, true, Specificity(0, 0, 0), 0));
            }
        }
        c
    }
}

fn is_zero_dimension(v: &str) -> bool {
    let v = v.trim();
    let v = v.strip_suffix("px").unwrap_or(v);
    v.parse::<f64>().is_ok_and(|n| n == 0.0)
}

fn inline_zero_size(doc: &Document, id: NodeId) -> bool {
    let el = doc.element(id).expect("element");
    if ["width", "height"]
        .iter()
        .any(|a| el.attr(a).is_some_and(is_zero_dimension))
    {
        return true;
    }
    el.attr("style").is_some_and(|s| {
        css::parse_declarations(s)
            .iter()
            .any(|d| (d.name == "width" || d.name == "height") && css::length_px(&d.value) == Some(0.0))
    })
}

fn offscreen(c: &Computed, cfg: &CleanseConfig) -> bool {
    if !matches!(c.get("position"), Some("absolute") | Some("fixed")) {
        return false;
    }
    let (vw, vh) = (cfg.viewport_width, cfg.viewport_height);
    let w = c.px("width");
    let h = c.px("height");
    let beyond = |start: Option<f64>, size: Option<f64>, extent: f64| match start {
        Some(s) if s >= extent => true,
        Some(s) if s < 0.0 => match size {
            Some(sz) => s + sz <= 0.0,
            None => s <= -extent,
        },
        _ => false,
    };
    beyond(c.px("left"), w, vw)
        || beyond(c.px("top"), h, vh)
        || beyond(c.px("right"), w, vw)
        || beyond(c.px("bottom"), h, vh)
}

/// Body descendants that are statically known not to render, outermost only.
fn find_hidden(doc: &Document, sheet: &Stylesheet, cfg: &CleanseConfig) -> Vec<NodeId> {
    let Some(body) = doc.body() else {
        return Vec::new();
    };
    let cascade = Cascade::new(sheet);
    let candidates: Vec<NodeId> = doc
        .descendants(body)
        .into_iter()
        .skip(1)
        .filter(|&id| doc.element(id).is_some())
        .collect();
    let computed: Vec<(NodeId, Computed)> = candidates.iter().map(|&id| (id, cascade.compute(doc, id))).collect();
    // Elements that explicitly opt back into visibility under a hidden ancestor.
    let visible: HashSet<NodeId> = computed
        .iter()
        .filter(|(_, c)| c.get("visibility") == Some("visible"))
        .map(|(id, _)| *id)
        .collect();

    let mut removed: HashSet<NodeId> = HashSet::new();
    let mut out = Vec::new();
    for (id, c) in &computed {
        if doc.ancestors(*id).any(|a| removed.contains(&a)) {
            continue;
        }
        let el = doc.element(*id).expect("element");
        let vis_hidden = matches!(c.get("visibility"), Some("hidden") | Some("collapse"))
            && !doc.descendants(*id).iter().any(|d| visible.contains(d));
        let hidden = el.has_attr("hidden")
            || c.get("display") == Some("none")
            || vis_hidden
            || inline_zero_size(doc, *id)
            || offscreen(c, cfg);
        if hidden {
            removed.insert(*id);
            out.push(*id);
        }
    }
    out
}

/// Drops style rules whose supported selectors match nothing, empty groups,
/// and unreferenced `@font-face`/`@keyframes`. Returns the number of rules dropped.
fn prune_dead_css(sheet: &mut Stylesheet, doc: &Document) -> usize {
    let mut dropped = 0;
    let items = std::mem::take(&mut sheet.items);
    sheet.items = prune_items(items, doc, &mut dropped);

    let mut used_values = Vec::new();
    collect_values(&sheet.items, &mut used_values);
    for id in doc.elements() {
        if let Some(style) = doc.element(id).and_then(|e| e.attr("style")) {
            used_values.extend(css::parse_declarations(style));
        }
    }
    let fonts: Vec<String> = used_values
        .iter()
        .filter(|d| d.name == "font-family" || d.name == "font")
        .map(|d| d.value.to_ascii_lowercase())
        .collect();
    let animations: Vec<String> = used_values
        .iter()
        .filter(|d| d.name == "animation" || d.name == "animation-name")
        .map(|d| d.value.clone())
        .collect();
    retain_referenced(&mut sheet.items, &fonts, &animations, &mut dropped);
    dropped
}

fn prune_items(items: Vec<CssItem>, doc: &Document, dropped: &mut usize) -> Vec<CssItem> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        match item {
            CssItem::Style(rule) => match SelectorList::parse(&rule.selector) {
                Ok(sel) if !sel.matches_any(doc) => *dropped += 1,
                _ => out.push(CssItem::Style(rule)),
            },
            CssItem::Group { name, prelude, rules } => {
                let kept = prune_items(rules, doc, dropped);
                if kept.iter().any(has_style_rule) {
                    out.push(CssItem::Group {
                        name,
                        prelude,
                        rules: kept,
                    });
                } else {
                    *dropped += 1 + kept.len();
                }
            }
            other => out.push(other),
        }
    }
    out
}

fn has_style_rule(item: &CssItem) -> bool {
    match item {
        CssItem::Style(_) => true,
        CssItem::Group { rules, .. } => rules.iter().any(has_style_rule),
        _ => false,
    }
}

fn collect_values(items: &[CssItem], out: &mut Vec<Declaration>) {
    for item in items {
        match item {
            CssItem::Style(r) => out.extend(css::parse_declarations(&r.body)),
            CssItem::Group { rules, .. } => collect_values(rules, out),
            _ => {}
        }
    }
}

fn retain_referenced(items: &mut Vec<CssItem>, fonts: &[String], animations: &[String], dropped: &mut usize) {
    items.retain_mut(|item| {
        let keep = match item {
            CssItem::Opaque { name, body, .. } if name.eq_ignore_ascii_case("font-face") => {
                font_family_of(body).is_none_or(|fam| fonts.iter().any(|v| mentions_family(v, &fam)))
            }
            CssItem::Opaque { name, prelude, .. } if name.to_ascii_lowercase().ends_with("keyframes") => {
                let n = prelude.trim().trim_matches(|c| c == '"' || c == '\'');
                animations.iter().any(|v| {
                    v.split(|c: char| c.is_whitespace() || c == ',')
                        .any(|t| t.trim_matches(|c| c == '"' || c == '\'') == n)
                })
            }
            CssItem::Group { rules, .. } => {
                retain_referenced(rules, fonts, animations, dropped);
                true
            }
            _ => true,
        };
        if !keep {
            *dropped += 1;
        }
        keep
    });
}

fn font_family_of(body: &str) -> Option<String> {
    css::parse_declarations(body)
        .into_iter()
        .find(|d| d.name == "font-family")
        .map(|d| {
            d.value
                .trim()
                .trim_matches(|c| c == '"' || c == '\'')
                .to_ascii_lowercase()
        })
}

fn mentions_family(value: &str, family: &str) -> bool {
    value
        .split(',')
        .map(|p| p.trim().trim_matches(|c| c == '"' || c == '\''))
        .any(|p| p == family || p.ends_with(&format!(" {family}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(html: &str) -> RawPage {
        RawPage::from_html("http://t/", html, 0)
    }

    fn body_of(html: &str) -> String {
        let start = html.find("<body>").unwrap() + 6;
        let end = html.rfind("</body>").unwrap();
        html[start..end].to_string()
    }

    #[test]
    fn default_gate_constants() {
        let g = LengthGate::default();
        assert_eq!((g.html_range.min(), g.html_range.max()), (640, 10240));
        assert_eq!((g.css_range.min(), g.css_range.max()), (640, 20480));
    }

    #[test]
    fn gate_boundaries() {
        let g = LengthGate::default();
        let mk = |h: usize, c: usize| {
            let mut p = RawPage::new("u", "x".repeat(h), vec![], 0);
            p.css_sources
                .push(crate::ingest::CssSource::new(CssOrigin::ExternalFile, "y".repeat(c)));
            length_filter(&p, &g)
        };
        assert!(!mk(639, 700).pass);
        assert!(mk(640, 640).pass);
        assert!(!mk(10241, 700).pass);
        assert!(mk(10240, 20480).pass);
        assert!(!mk(700, 20481).pass);
        assert_eq!(mk(639, 700).html_len, 639);
    }

    #[test]
    fn range_parsing() {
        assert_eq!(
            "640:10240".parse::<CharRange>().unwrap(),
            CharRange::new(640, 10240).unwrap()
        );
        assert!("9:1".parse::<CharRange>().is_err());
        assert!("abc".parse::<CharRange>().is_err());
    }

    #[test]
    fn rule_by_rule_example() {
        let p = cleanse(&page(r#"<div data-x="1" class="a"><!--c--><script>1</script></div>"#)).unwrap();
        assert_eq!(body_of(&p.html), r#"<div class="a"></div>"#);
        assert!(p.html.contains("<head><style></style></head>"));
        let r = p.removed_report;
        assert_eq!((r.comments, r.script, r.attributes, r.meta, r.hidden), (1, 1, 1, 0, 0));
    }

    #[test]
    fn dead_rule_pruned() {
        let p = cleanse(&page(
            r#"<style>.a{color:red} .b{color:blue}</style><p class="a">x</p>"#,
        ))
        .unwrap();
        assert!(p.html.contains("<style>.a{color:red}</style>"), "{}", p.html);
        assert_eq!(p.removed_report.dead_css_rules, 1);
    }

    #[test]
    fn hidden_attribute() {
        let p = cleanse(&page("<p hidden>x</p><p>y</p>")).unwrap();
        assert_eq!(body_of(&p.html), "<p>y</p>");
        assert_eq!(p.removed_report.hidden, 1);
    }

    #[test]
    fn css_and_inline_hiding() {
        let html = r#"<style>.h{display:none}.v{visibility:hidden}.s{display:block!important}</style>
<div class="h">a</div><div class="h s">b</div><div class="v">c</div>
<div class="v"><span style="visibility:visible">d</span></div>
<img width="0" src="x.png"><div style="height:0px">e</div>
<div style="position:absolute;left:-9999px">f</div><div style="position:absolute;top:20000px">g</div>
<div style="position:absolute;left:10px">h</div><div style="display:none!important" class="s">i</div>"#;
        let p = cleanse(&page(html)).unwrap();
        let body = body_of(&p.html);
        for kept in ["b", "d", "h"] {
            assert!(body.contains(&format!(">{kept}<")), "{kept} missing from {body}");
        }
        for gone in [">a<", ">c<", ">e<", ">f<", ">g<", ">i<", "<img"] {
            assert!(!body.contains(gone), "{gone} survived in {body}");
        }
        assert_eq!(p.removed_report.hidden, 7);
    }

    #[test]
    fn merges_sources_in_order_and_keeps_unsupported() {
        let mut raw = page(r#"<head><style>p{color:red}</style></head><p>x</p><style>a:hover{color:blue}</style>"#);
        raw.css_sources.insert(
            0,
            crate::ingest::CssSource::new(CssOrigin::ExternalFile, "body{margin:0}"),
        );
        raw.css_sources.push(crate::ingest::CssSource::unresolved());
        let p = cleanse(&raw).unwrap();
        assert!(
            p.html
                .contains("<style>body{margin:0}\np{color:red}\na:hover{color:blue}</style></head>"),
            "{}",
            p.html
        );
        assert_eq!(p.html.matches("<style").count(), 1);
        assert_eq!(p.removed_report.unresolved_css, 1);
    }

    #[test]
    fn at_rules() {
        let css = "@media (max-width:600px){.a{x:1}.zz{x:2}}@media print{.zz{x:3}}\
@font-face{font-family:\"Used\";src:url(a.woff)}@font-face{font-family:Unused;src:url(b.woff)}\
@keyframes spin{to{transform:rotate(1turn)}}@keyframes idle{}\
.a{font-family:Used,sans-serif;animation:spin 1s}@import url(x.css);";
        let p = cleanse(&page(&format!(r#"<style>{css}</style><p class="a">x</p>"#))).unwrap();
        let style = &p.html[p.html.find("<style>").unwrap()..p.html.find("</style>").unwrap()];
        assert!(style.contains("@media (max-width:600px){.a{x:1}}"), "{style}");
        assert!(!style.contains("print"));
        assert!(style.contains("Used") && !style.contains("Unused"));
        assert!(style.contains("spin") && !style.contains("idle"));
        assert!(style.contains("@import"));
        // .zz twice, the emptied @media print, Unused, idle
        assert_eq!(p.removed_report.dead_css_rules, 5);
    }

    #[test]
    fn style_end_tag_in_css_is_escaped() {
        let raw = RawPage::new(
            "u",
            "<p>x</p>",
            vec![crate::ingest::CssSource::new(
                CssOrigin::ExternalFile,
                "p{content:\"</style><b>\"}",
            )],
            0,
        );
        let p = cleanse(&raw).unwrap();
        let again = cleanse(&page(&p.html)).unwrap();
        assert_eq!(p.html, again.html);
        assert_eq!(body_of(&p.html), "<p>x</p>");
    }

    #[test]
    fn empty_document_error() {
        assert!(matches!(
            cleanse(&page("just text")),
            Err(PurifyError::EmptyDocument { .. })
        ));
    }

    #[test]
    fn idempotent_on_messy_input() {
        let html = r#"<!DOCTYPE html><html lang="en"><head><meta charset="utf-8"><title>T</title>
<link rel="stylesheet" href="gone.css"><style>.x{color:red}#y>p{margin:0}.unused{a:b}</style></head>
<body onload="f()"><table><tr><td>1<!--c--></td></tr></table><div id="y"><p>a<b>b</p>c</b></div>
<template><!--t--><p data-q=1>t</p></template><svg viewBox="0 0 1 1"><path d="M0"/></svg>
<p hidden>h</p><pre>
x</pre><textarea>
y</textarea></body></html>"#;
        let first = cleanse(&page(html)).unwrap();
        let second = cleanse(&page(&first.html)).unwrap();
        assert_eq!(first.html, second.html);
        assert_eq!(second.removed_report.dead_css_rules, 0);
        assert!(!first.html.contains("<!--"));
        assert!(!first.html.contains("data-q"));
    }
}
