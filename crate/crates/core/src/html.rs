//! Arena-backed HTML document built by the html5ever tree builder.
//!
//! Every stage that touches markup (ingest, purification, tag trees, safety text
//! extraction) goes through [`Document`], so they all agree on the same
//! standard-recovery parse and the same serialization.

use std::borrow::Cow;
use std::cell::{Cell, Ref, RefCell};
use std::collections::BTreeSet;
use std::fmt::Write as _;

use html5ever::interface::{ElementFlags, NodeOrText, QuirksMode, TreeSink};
use html5ever::tendril::{StrTendril, TendrilSink};
use html5ever::tokenizer::states::RawKind;
use html5ever::tokenizer::{BufferQueue, TagKind, Token, TokenSink, TokenSinkResult, Tokenizer, TokenizerOpts};
use html5ever::{ns, parse_document, Attribute, ParseOpts, QualName};

pub type NodeId = usize;

const ROOT: NodeId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Namespace {
    Html,
    Svg,
    MathMl,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attr {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone)]
pub struct Element {
    /// Local name as produced by the parser (HTML names are already lowercase).
    pub name: String,
    pub ns: Namespace,
    pub attrs: Vec<Attr>,
    pub template_contents: Option<NodeId>,
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|a| a.name.eq_ignore_ascii_case(name))
            .map(|a| a.value.as_str())
    }

    pub fn has_attr(&self, name: &str) -> bool {
        self.attr(name).is_some()
    }

    pub fn is_html(&self, name: &str) -> bool {
        self.ns == Namespace::Html && self.name == name
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.attr("class").unwrap_or("").split_ascii_whitespace()
    }
}

#[derive(Debug, Clone)]
pub enum NodeData {
    Document,
    Fragment,
    Doctype { name: String },
    Element(Element),
    Text(String),
    Comment(String),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub data: NodeData,
}

impl Node {
    fn new(data: NodeData) -> Self {
        Node {
            parent: None,
            children: Vec::new(),
            data,
        }
    }

    pub fn as_element(&self) -> Option<&Element> {
        match &self.data {
            NodeData::Element(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Document {
    nodes: Vec<Node>,
}

impl Document {
    /// Parses with the WHATWG tree-construction algorithm (scripting enabled).
    pub fn parse(html: &str) -> Document {
        let sink = Sink::default();
        parse_document(sink, ParseOpts::default()).one(html)
    }

    pub fn root(&self) -> NodeId {
        ROOT
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn element(&self, id: NodeId) -> Option<&Element> {
        self.nodes[id].as_element()
    }

    pub fn element_mut(&mut self, id: NodeId) -> Option<&mut Element> {
        match &mut self.nodes[id].data {
            NodeData::Element(e) => Some(e),
            _ => None,
        }
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    pub fn element_children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes[id]
            .children
            .iter()
            .copied()
            .filter(move |&c| self.nodes[c].as_element().is_some())
    }

    /// The `<html>` element, if the tree has one.
    pub fn document_element(&self) -> Option<NodeId> {
        self.element_children(ROOT).next()
    }

    pub fn find_html_child(&self, parent: NodeId, name: &str) -> Option<NodeId> {
        self.element_children(parent)
            .find(|&c| self.element(c).is_some_and(|e| e.is_html(name)))
    }

    pub fn head(&self) -> Option<NodeId> {
        self.document_element().and_then(|h| self.find_html_child(h, "head"))
    }

    pub fn body(&self) -> Option<NodeId> {
        self.document_element().and_then(|h| self.find_html_child(h, "body"))
    }

    /// Pre-order ids of all nodes attached under `from` (inclusive).
    pub fn descendants(&self, from: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![from];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.nodes[id].children.iter().rev().copied());
        }
        out
    }

    /// Pre-order ids of all attached elements.
    pub fn elements(&self) -> Vec<NodeId> {
        self.descendants(ROOT)
            .into_iter()
            .filter(|&id| self.nodes[id].as_element().is_some())
            .collect()
    }

    pub fn ancestors(&self, id: NodeId) -> Ancestors<'_> {
        Ancestors {
            doc: self,
            next: self.nodes[id].parent,
        }
    }

    pub fn detach(&mut self, id: NodeId) {
        if let Some(parent) = self.nodes[id].parent.take() {
            self.nodes[parent].children.retain(|&c| c != id);
        }
    }

    pub fn create(&mut self, data: NodeData) -> NodeId {
        self.nodes.push(Node::new(data));
        self.nodes.len() - 1
    }

    pub fn create_html_element(&mut self, name: &str) -> NodeId {
        self.create(NodeData::Element(Element {
            name: name.to_string(),
            ns: Namespace::Html,
            attrs: Vec::new(),
            template_contents: None,
        }))
    }

    pub fn append_child(&mut self, parent: NodeId, child: NodeId) {
        self.detach(child);
        self.nodes[child].parent = Some(parent);
        self.nodes[parent].children.push(child);
    }

    /// Concatenated text of all descendant text nodes.
    pub fn text_content(&self, id: NodeId) -> String {
        let mut out = String::new();
        for n in self.descendants(id) {
            if let NodeData::Text(t) = &self.nodes[n].data {
                out.push_str(t);
            }
        }
        out
    }

    pub fn to_html(&self) -> String {
        let mut out = String::new();
        for &c in &self.nodes[ROOT].children {
            self.serialize_node(c, &mut out);
        }
        out
    }

    fn serialize_node(&self, id: NodeId, out: &mut String) {
        match &self.nodes[id].data {
            NodeData::Document | NodeData::Fragment => {
                for &c in &self.nodes[id].children {
                    self.serialize_node(c, out);
                }
            }
            NodeData::Doctype { name } => {
                let _ = write!(out, "<!DOCTYPE {name}>");
            }
            NodeData::Comment(text) => {
                let _ = write!(out, "<!--{text}-->");
            }
            NodeData::Text(text) => {
                let raw = self.nodes[id]
                    .parent
                    .and_then(|p| self.element(p))
                    .is_some_and(|e| e.ns == Namespace::Html && is_raw_text(&e.name));
                if raw {
                    out.push_str(text);
                } else {
                    escape_text(text, out);
                }
            }
            NodeData::Element(el) => {
                out.push('<');
                out.push_str(&el.name);
                for a in &el.attrs {
                    out.push(' ');
                    out.push_str(&a.name);
                    out.push_str("=\"");
                    escape_attr(&a.value, out);
                    out.push('"');
                }
                out.push('>');
                if el.ns == Namespace::Html && is_void(&el.name) {
                    return;
                }
                let kids = match el.template_contents {
                    Some(t) => &self.nodes[t].children,
                    None => &self.nodes[id].children,
                };
                if el.ns == Namespace::Html && matches!(el.name.as_str(), "pre" | "textarea" | "listing") {
                    // The parser drops one leading newline in these elements.
                    if let Some(NodeData::Text(t)) = kids.first().map(|&k| &self.nodes[k].data) {
                        if t.starts_with('\n') {
                            out.push('\n');
                        }
                    }
                }
                for &c in kids {
                    self.serialize_node(c, out);
                }
                out.push_str("</");
                out.push_str(&el.name);
                out.push('>');
            }
        }
    }
}

pub struct Ancestors<'a> {
    doc: &'a Document,
    next: Option<NodeId>,
}

impl Iterator for Ancestors<'_> {
    type Item = NodeId;

    fn next(&mut self) -> Option<NodeId> {
        let cur = self.next?;
        self.next = self.doc.nodes[cur].parent;
        Some(cur)
    }
}

pub fn is_void(name: &str) -> bool {
    matches!(
        name,
        "area"
            | "base"
            | "basefont"
            | "bgsound"
            | "br"
            | "col"
            | "embed"
            | "frame"
            | "hr"
            | "img"
            | "input"
            | "keygen"
            | "link"
            | "meta"
            | "param"
            | "source"
            | "track"
            | "wbr"
    )
}

fn is_raw_text(name: &str) -> bool {
    matches!(
        name,
        "style" | "script" | "xmp" | "iframe" | "noembed" | "noframes" | "plaintext" | "noscript"
    )
}

fn escape_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '\u{a0}' => out.push_str("&nbsp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
}

fn escape_attr(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '\u{a0}' => out.push_str("&nbsp;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
}

/// True when the tokenizer sees at least one start tag in `html`.
///
/// The tree builder synthesizes `html`/`head`/`body` for any input, so this is
/// the only way to tell a comment-only or text-only source from real markup.
pub fn has_start_tag(html: &str) -> bool {
    scan_start_tags(html, true).is_some_and(|names| !names.is_empty())
}

/// Lowercased names of every start tag written in the source.
pub fn start_tag_names(html: &str) -> BTreeSet<String> {
    scan_start_tags(html, false).unwrap_or_default()
}

fn scan_start_tags(html: &str, first_only: bool) -> Option<BTreeSet<String>> {
    struct Probe {
        names: RefCell<BTreeSet<String>>,
        first_only: bool,
    }
    impl TokenSink for Probe {
        type Handle = ();
        fn process_token(&self, token: Token, _line: u64) -> TokenSinkResult<()> {
            let Token::TagToken(tag) = token else {
                return TokenSinkResult::Continue;
            };
            if tag.kind != TagKind::StartTag {
                return TokenSinkResult::Continue;
            }
            let name = tag.name.to_ascii_lowercase().to_string();
            let next = match name.as_str() {
                _ if self.first_only => TokenSinkResult::Continue,
                "script" => TokenSinkResult::RawData(RawKind::ScriptData),
                "style" | "xmp" | "iframe" | "noembed" | "noframes" | "noscript" => {
                    TokenSinkResult::RawData(RawKind::Rawtext)
                }
                "title" | "textarea" => TokenSinkResult::RawData(RawKind::Rcdata),
                "plaintext" => TokenSinkResult::Plaintext,
                _ => TokenSinkResult::Continue,
            };
            self.names.borrow_mut().insert(name);
            next
        }
    }
    let tok = Tokenizer::new(
        Probe {
            names: RefCell::new(BTreeSet::new()),
            first_only,
        },
        TokenizerOpts::default(),
    );
    let input = BufferQueue::default();
    input.push_back(StrTendril::from_slice(html));
    let _ = tok.feed(&input);
    tok.end();
    Some(tok.sink.names.take())
}

struct Sink {
    nodes: RefCell<Vec<Node>>,
    names: RefCell<Vec<Option<QualName>>>,
    quirks: Cell<QuirksMode>,
}

impl Default for Sink {
    fn default() -> Self {
        Sink {
            nodes: RefCell::new(vec![Node::new(NodeData::Document)]),
            names: RefCell::new(vec![None]),
            quirks: Cell::new(QuirksMode::NoQuirks),
        }
    }
}

impl Sink {
    fn push(&self, data: NodeData, name: Option<QualName>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node::new(data));
        self.names.borrow_mut().push(name);
        nodes.len() - 1
    }

    fn detach(&self, id: NodeId) {
        let mut nodes = self.nodes.borrow_mut();
        if let Some(p) = nodes[id].parent.take() {
            nodes[p].children.retain(|&c| c != id);
        }
    }

    fn insert_at(&self, parent: NodeId, index: usize, child: NodeOrText<NodeId>) {
        match child {
            NodeOrText::AppendText(text) => {
                let mut nodes = self.nodes.borrow_mut();
                if index > 0 {
                    let prev = nodes[parent].children[index - 1];
                    if let NodeData::Text(t) = &mut nodes[prev].data {
                        t.push_str(&text);
                        return;
                    }
                }
                drop(nodes);
                let id = self.push(NodeData::Text(text.to_string()), None);
                let mut nodes = self.nodes.borrow_mut();
                nodes[id].parent = Some(parent);
                nodes[parent].children.insert(index, id);
            }
            NodeOrText::AppendNode(id) => {
                self.detach(id);
                let mut nodes = self.nodes.borrow_mut();
                let index = index.min(nodes[parent].children.len());
                nodes[id].parent = Some(parent);
                nodes[parent].children.insert(index, id);
            }
        }
    }
}

fn convert_ns(name: &QualName) -> Namespace {
    if name.ns == ns!(html) {
        Namespace::Html
    } else if name.ns == ns!(svg) {
        Namespace::Svg
    } else if name.ns == ns!(mathml) {
        Namespace::MathMl
    } else {
        Namespace::Other
    }
}

fn convert_attr(a: Attribute) -> Attr {
    let name = match &a.name.prefix {
        Some(p) => format!("{}:{}", p, a.name.local),
        None => a.name.local.to_string(),
    };
    Attr {
        name,
        value: a.value.to_string(),
    }
}

impl TreeSink for Sink {
    type Handle = NodeId;
    type Output = Document;
    type ElemName<'a> = Ref<'a, QualName>;

    fn finish(self) -> Document {
        Document {
            nodes: self.nodes.into_inner(),
        }
    }

    fn parse_error(&self, _msg: Cow<'static, str>) {}

    fn get_document(&self) -> NodeId {
        ROOT
    }

    fn elem_name<'a>(&'a self, target: &'a NodeId) -> Ref<'a, QualName> {
        Ref::map(self.names.borrow(), |n| n[*target].as_ref().expect("not an element"))
    }

    fn create_element(&self, name: QualName, attrs: Vec<Attribute>, flags: ElementFlags) -> NodeId {
        let el = Element {
            name: name.local.to_string(),
            ns: convert_ns(&name),
            attrs: attrs.into_iter().map(convert_attr).collect(),
            template_contents: None,
        };
        let id = self.push(NodeData::Element(el), Some(name));
        if flags.template {
            let frag = self.push(NodeData::Fragment, None);
            if let NodeData::Element(e) = &mut self.nodes.borrow_mut()[id].data {
                e.template_contents = Some(frag);
            }
        }
        id
    }

    fn create_comment(&self, text: StrTendril) -> NodeId {
        self.push(NodeData::Comment(text.to_string()), None)
    }

    fn create_pi(&self, _target: StrTendril, data: StrTendril) -> NodeId {
        // Processing instructions only exist in XML; keep them as comments.
        self.push(NodeData::Comment(data.to_string()), None)
    }

    fn append(&self, parent: &NodeId, child: NodeOrText<NodeId>) {
        let len = self.nodes.borrow()[*parent].children.len();
        self.insert_at(*parent, len, child);
    }

    fn append_based_on_parent_node(&self, element: &NodeId, prev_element: &NodeId, child: NodeOrText<NodeId>) {
        if self.nodes.borrow()[*element].parent.is_some() {
            self.append_before_sibling(element, child);
        } else {
            self.append(prev_element, child);
        }
    }

    fn append_doctype_to_document(&self, name: StrTendril, _public_id: StrTendril, _system_id: StrTendril) {
        let id = self.push(NodeData::Doctype { name: name.to_string() }, None);
        self.append(&ROOT, NodeOrText::AppendNode(id));
    }

    fn get_template_contents(&self, target: &NodeId) -> NodeId {
        match &self.nodes.borrow()[*target].data {
            NodeData::Element(Element {
                template_contents: Some(t),
                ..
            }) => *t,
            _ => panic!("not a template element"),
        }
    }

    fn same_node(&self, x: &NodeId, y: &NodeId) -> bool {
        x == y
    }

    fn set_quirks_mode(&self, mode: QuirksMode) {
        self.quirks.set(mode);
    }

    fn append_before_sibling(&self, sibling: &NodeId, new_node: NodeOrText<NodeId>) {
        let parent = self.nodes.borrow()[*sibling].parent.expect("sibling has no parent");
        if let NodeOrText::AppendNode(id) = &new_node {
            self.detach(*id);
        }
        let index = self.nodes.borrow()[parent]
            .children
            .iter()
            .position(|c| c == sibling)
            .expect("sibling not among parent's children");
        self.insert_at(parent, index, new_node);
    }

    fn add_attrs_if_missing(&self, target: &NodeId, attrs: Vec<Attribute>) {
        if let NodeData::Element(e) = &mut self.nodes.borrow_mut()[*target].data {
            for a in attrs {
                let a = convert_attr(a);
                if !e.attrs.iter().any(|x| x.name == a.name) {
                    e.attrs.push(a);
                }
            }
        }
    }

    fn remove_from_parent(&self, target: &NodeId) {
        self.detach(*target);
    }

    fn reparent_children(&self, node: &NodeId, new_parent: &NodeId) {
        let mut nodes = self.nodes.borrow_mut();
        let kids = std::mem::take(&mut nodes[*node].children);
        for &k in &kids {
            nodes[k].parent = Some(*new_parent);
        }
        nodes[*new_parent].children.extend(kids);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(doc: &Document, id: NodeId) -> String {
        let el = doc.element(id).unwrap();
        let kids: Vec<String> = doc.element_children(id).map(|c| tags(doc, c)).collect();
        if kids.is_empty() {
            el.name.clone()
        } else {
            format!("{}({})", el.name, kids.join(","))
        }
    }

    #[test]
    fn implied_structure_is_synthesized() {
        let doc = Document::parse("<p>x</p>");
        assert_eq!(tags(&doc, doc.document_element().unwrap()), "html(head,body(p))");
    }

    #[test]
    fn misnested_markup_is_recovered() {
        let doc = Document::parse("<b><i>x</b>y</i>");
        let html = doc.to_html();
        assert_eq!(html, "<html><head></head><body><b><i>x</i></b><i>y</i></body></html>");
    }

    #[test]
    fn serialization_escapes_text_and_attributes() {
        let doc = Document::parse(r#"<p title="a&quot;b">1 &lt; 2 &amp; 3</p>"#);
        let out = doc.to_html();
        assert!(out.contains(r#"<p title="a&quot;b">1 &lt; 2 &amp; 3</p>"#), "{out}");
    }

    #[test]
    fn raw_text_and_void_elements() {
        let doc = Document::parse("<style>a > b {}</style><br><img src=x>");
        let out = doc.to_html();
        assert!(out.contains("<style>a > b {}</style>"));
        assert!(out.contains("<br><img src=\"x\">"));
        assert!(!out.contains("</br>"));
    }

    #[test]
    fn pre_leading_newline_survives_reparse() {
        let doc = Document::parse("<pre>\n\nx</pre>");
        let once = doc.to_html();
        let twice = Document::parse(&once).to_html();
        assert_eq!(once, twice);
    }

    #[test]
    fn foster_parenting_reserializes_stably() {
        let src = "<table><tr><td>a</td></tr>oops<div>b</div></table>";
        let once = Document::parse(src).to_html();
        let twice = Document::parse(&once).to_html();
        assert_eq!(once, twice);
    }

    #[test]
    fn start_tag_probe() {
        assert!(has_start_tag("<p>x</p>"));
        assert!(has_start_tag("<html></html>"));
        assert!(!has_start_tag("<!-- c -->"));
        assert!(!has_start_tag("just text"));
        assert!(!has_start_tag("</p>"));
    }

    #[test]
    fn start_tags_inside_raw_text_are_ignored() {
        let names = start_tag_names("<script>document.write('<body>')</script><p>");
        assert_eq!(names.into_iter().collect::<Vec<_>>(), vec!["p", "script"]);
    }

    #[test]
    fn svg_attributes_keep_prefix() {
        let doc = Document::parse(r##"<svg><use xlink:href="#a"></use></svg>"##);
        assert!(doc.to_html().contains(r##"xlink:href="#a""##));
    }
}
