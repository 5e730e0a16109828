//! Tag-only DOM trees, 1-height subtree extraction, TreeBLEU and code statistics.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Mode};
use crate::html::{self, Document, NodeId};
use crate::tokenizer::TokenCounter;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomError {
    #[error("document contains no elements")]
    EmptyDocument,
    #[error("invalid tag name {0:?}")]
    InvalidName(String),
}

/// Element-only tree: tag names and child order, nothing else.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TagTree {
    pub name: String,
    #[serde(default)]
    pub children: Vec<TagTree>,
}

impl TagTree {
    pub fn leaf(name: impl Into<String>) -> Self {
        TagTree {
            name: name.into(),
            children: Vec::new(),
        }
    }

    pub fn node(name: impl Into<String>, children: Vec<TagTree>) -> Self {
        TagTree {
            name: name.into(),
            children,
        }
    }

    /// Checks the name invariant on every node: non-empty, lowercase, and free
    /// of the characters used as separators in [`SubtreeKey`].
    pub fn validate(&self) -> Result<(), DomError> {
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            if !valid_name(&t.name) {
                return Err(DomError::InvalidName(t.name.clone()));
            }
            stack.extend(t.children.iter());
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(TagTree::node_count).sum::<usize>()
    }

    pub fn internal_node_count(&self) -> usize {
        usize::from(!self.children.is_empty()) + self.children.iter().map(TagTree::internal_node_count).sum::<usize>()
    }

    /// Longest root-to-leaf path, root counted as 1.
    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(TagTree::depth).max().unwrap_or(0)
    }

    pub fn names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(t) = stack.pop() {
            out.push(t.name.as_str());
            stack.extend(t.children.iter().rev());
        }
        out
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name
            .chars()
            .any(|c| c.is_whitespace() || c == KEY_PARENT_SEP || c == '/' || c.to_lowercase().ne([c]))
}

const KEY_PARENT_SEP: char = '>';
const KEY_CHILD_SEP: char = ' ';

/// One parent together with its ordered child names.
///
/// The repr is `parent>child1 child2 ...`; neither `>` nor whitespace can occur
/// in a tag name, so equal reprs mean equal subtrees.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubtreeKey(String);

impl SubtreeKey {
    fn of(node: &TagTree) -> Option<SubtreeKey> {
        if node.children.is_empty() {
            return None;
        }
        let mut repr = String::with_capacity(node.name.len() + node.children.len() * 6);
        repr.push_str(&node.name);
        repr.push(KEY_PARENT_SEP);
        for (i, c) in node.children.iter().enumerate() {
            if i > 0 {
                repr.push(KEY_CHILD_SEP);
            }
            repr.push_str(&c.name);
        }
        Some(SubtreeKey(repr))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubtreeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds the tag tree rooted at `<html>`, after standard parser recovery.
pub fn parse_tag_tree(html: &str) -> Result<TagTree, DomError> {
    if !html::has_start_tag(html) {
        return Err(DomError::EmptyDocument);
    }
    let doc = Document::parse(html);
    tag_tree_of(&doc).ok_or(DomError::EmptyDocument)
}

/// Tag tree of an already-parsed document.
pub fn tag_tree_of(doc: &Document) -> Option<TagTree> {
    doc.document_element().map(|root| build(doc, root))
}

fn build(doc: &Document, id: NodeId) -> TagTree {
    let el = doc.element(id).expect("element id");
    TagTree {
        name: el.name.to_lowercase(),
        children: doc.element_children(id).map(|c| build(doc, c)).collect(),
    }
}

/// Every distinct 1-height subtree of `tree`, collected into one global set.
pub fn one_height_subtrees(tree: &TagTree) -> BTreeSet<SubtreeKey> {
    let mut set = BTreeSet::new();
    let mut stack = vec![tree];
    while let Some(node) = stack.pop() {
        if let Some(key) = SubtreeKey::of(node) {
            set.insert(key);
        }
        stack.extend(node.children.iter());
    }
    set
}

/// Recall of the reference's 1-height subtrees in the candidate.
///
/// An empty reference set scores 1.0 against an empty candidate set and 0.0
/// otherwise.
pub fn tree_bleu(candidate: &TagTree, reference: &TagTree) -> f64 {
    let cand = one_height_subtrees(candidate);
    let refs = one_height_subtrees(reference);
    tree_bleu_sets(&cand, &refs)
}

pub fn tree_bleu_sets(cand: &BTreeSet<SubtreeKey>, refs: &BTreeSet<SubtreeKey>) -> f64 {
    if refs.is_empty() {
        return if cand.is_empty() { 1.0 } else { 0.0 };
    }
    let hit = refs.iter().filter(|k| cand.contains(*k)).count();
    hit as f64 / refs.len() as f64
}

pub fn tree_bleu_batch(pairs: &[(TagTree, TagTree)], mode: Mode) -> Vec<f64> {
    exec::map(mode, pairs, |(c, r)| tree_bleu(c, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CodeStats {
    pub token_len: usize,
    pub tag_count: usize,
    pub unique_tag_count: usize,
    pub dom_depth: usize,
}

/// Elements the tree builder inserts on its own when the source omits them.
const IMPLIABLE: &[&str] = &["html", "head", "body", "tbody"];

/// Statistics over the elements actually written in the source.
///
/// `html`, `head`, `body` and `tbody` wrappers synthesized by parser recovery
/// are not counted (their children take their place), so a document with no
/// explicit `<head>` has no head in its tag count or depth.
pub fn code_stats(html: &str, tokenizer: &dyn TokenCounter) -> Result<CodeStats, DomError> {
    let tree = parse_tag_tree(html)?;
    let written = html::start_tag_names(html);
    let forest = drop_implied(tree, &|name| IMPLIABLE.contains(&name) && !written.contains(name));
    Ok(stats_of_forest(&forest, tokenizer.count_tokens(html)))
}

fn drop_implied(tree: TagTree, implied: &dyn Fn(&str) -> bool) -> Vec<TagTree> {
    let children: Vec<TagTree> = tree
        .children
        .into_iter()
        .flat_map(|c| drop_implied(c, implied))
        .collect();
    if implied(&tree.name) {
        children
    } else {
        vec![TagTree {
            name: tree.name,
            children,
        }]
    }
}

pub fn stats_of_tree(tree: &TagTree, token_len: usize) -> CodeStats {
    stats_of_forest(std::slice::from_ref(tree), token_len)
}

fn stats_of_forest(forest: &[TagTree], token_len: usize) -> CodeStats {
    let names: Vec<&str> = forest.iter().flat_map(TagTree::names).collect();
    let unique: BTreeSet<&str> = names.iter().copied().collect();
    CodeStats {
        token_len,
        tag_count: names.len(),
        unique_tag_count: unique.len(),
        dom_depth: forest.iter().map(TagTree::depth).max().unwrap_or(0),
    }
}

pub fn code_stats_batch<S: AsRef<str> + Sync>(
    pages: &[S],
    tokenizer: &(dyn TokenCounter + Sync),
    mode: Mode,
) -> Vec<Result<CodeStats, DomError>> {
    exec::map(mode, pages, |h| code_stats(h.as_ref(), tokenizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(name: &str, kids: Vec<TagTree>) -> TagTree {
        TagTree::node(name, kids)
    }
    fn l(name: &str) -> TagTree {
        TagTree::leaf(name)
    }
    fn keys(tree: &TagTree) -> Vec<String> {
        one_height_subtrees(tree).into_iter().map(|k| k.0).collect()
    }

    struct CharCount;
    impl TokenCounter for CharCount {
        fn count_tokens(&self, text: &str) -> usize {
            text.chars().count()
        }
    }

    #[test]
    fn parse_direct_structure() {
        let tree = parse_tag_tree("<html><body><p>x</p></body></html>").unwrap();
        assert_eq!(tree, t("html", vec![l("head"), t("body", vec![l("p")])]));
    }

    #[test]
    fn parse_recovers_missing_root() {
        let tree = parse_tag_tree("<p>x</p>").unwrap();
        assert_eq!(tree, t("html", vec![l("head"), t("body", vec![l("p")])]));
    }

    #[test]
    fn comment_only_is_empty() {
        assert_eq!(parse_tag_tree("<!-- c -->"), Err(DomError::EmptyDocument));
        assert_eq!(parse_tag_tree(""), Err(DomError::EmptyDocument));
    }

    #[test]
    fn svg_names_are_lowercased() {
        let tree = parse_tag_tree("<svg><linearGradient></linearGradient></svg>").unwrap();
        assert!(tree.names().contains(&"lineargradient"));
    }

    #[test]
    fn leaf_has_no_subtrees() {
        assert!(one_height_subtrees(&l("div")).is_empty());
    }

    #[test]
    fn hand_run_subtrees() {
        let tree = t("html", vec![t("body", vec![t("div", vec![l("p")]), l("div")])]);
        assert_eq!(keys(&tree), vec!["body>div div", "div>p", "html>body"]);
    }

    #[test]
    fn duplicate_leaves_add_nothing() {
        let tree = t("html", vec![t("body", vec![l("div"), l("div")])]);
        assert_eq!(keys(&tree), vec!["body>div div", "html>body"]);
    }

    #[test]
    fn child_order_matters() {
        let a = t("ul", vec![l("li"), l("p")]);
        let b = t("ul", vec![l("p"), l("li")]);
        assert_eq!(tree_bleu(&a, &b), 0.0);
    }

    #[test]
    fn worked_example_two_thirds() {
        let cand = t("html", vec![t("body", vec![t("div", vec![l("p")]), l("div")])]);
        let reference = t("html", vec![t("body", vec![t("div", vec![l("p")])])]);
        assert_eq!(tree_bleu(&cand, &reference), 2.0 / 3.0);
    }

    #[test]
    fn disjoint_is_zero() {
        let cand = t("html", vec![l("body")]);
        let reference = t("div", vec![l("span")]);
        assert_eq!(tree_bleu(&cand, &reference), 0.0);
    }

    #[test]
    fn empty_reference_conventions() {
        assert_eq!(tree_bleu(&l("div"), &l("p")), 1.0);
        assert_eq!(tree_bleu(&t("div", vec![l("p")]), &l("p")), 0.0);
    }

    #[test]
    fn stats_fixtures() {
        let a = code_stats(
            "<html><head></head><body><div><p>hi</p></div></body></html>",
            &CharCount,
        )
        .unwrap();
        assert_eq!((a.tag_count, a.unique_tag_count, a.dom_depth), (5, 5, 4));
        let b = code_stats("<html><body><a></a><a></a></body></html>", &CharCount).unwrap();
        assert_eq!((b.tag_count, b.unique_tag_count, b.dom_depth), (4, 3, 3));
        assert_eq!(b.token_len, 40);
    }

    #[test]
    fn stats_skip_synthesized_wrappers() {
        let s = code_stats("<p>a</p><p>b</p>", &CharCount).unwrap();
        assert_eq!((s.tag_count, s.unique_tag_count, s.dom_depth), (2, 1, 1));
        let t = code_stats("<table><tr><td>x</td></tr></table>", &CharCount).unwrap();
        assert_eq!((t.tag_count, t.dom_depth), (3, 3));
    }

    #[test]
    fn html_only_depth_is_one() {
        assert_eq!(l("html").depth(), 1);
    }

    #[test]
    fn name_validation() {
        assert!(t("div", vec![l("p")]).validate().is_ok());
        assert!(l("DIV").validate().is_err());
        assert!(l("a b").validate().is_err());
        assert!(l("").validate().is_err());
        assert!(l("a>b").validate().is_err());
    }

    #[test]
    fn json_shape() {
        let tree = t("html", vec![l("body")]);
        let json = serde_json::to_string(&tree).unwrap();
        assert_eq!(json, r#"{"name":"html","children":[{"name":"body","children":[]}]}"#);
        let back: TagTree = serde_json::from_str(r#"{"name":"html","children":[{"name":"body"}]}"#).unwrap();
        assert_eq!(back, tree);
    }

    fn arb_tree() -> impl Strategy<Value = TagTree> {
        let leaf = prop::sample::select(vec!["div", "p", "span", "a"]).prop_map(TagTree::leaf);
        leaf.prop_recursive(4, 24, 4, |inner| {
            (
                prop::sample::select(vec!["div", "ul", "body", "section"]),
                prop::collection::vec(inner, 0..4),
            )
                .prop_map(|(n, kids)| TagTree::node(n, kids))
        })
    }

    proptest! {
        #[test]
        fn identity_scores_one(tree in arb_tree()) {
            prop_assume!(!tree.children.is_empty());
            prop_assert_eq!(tree_bleu(&tree, &tree), 1.0);
        }

        #[test]
        fn bounded_and_recall_only(c in arb_tree(), r in arb_tree(), extra in arb_tree()) {
            let base = tree_bleu(&c, &r);
            prop_assert!((0.0..=1.0).contains(&base));
            let cs = one_height_subtrees(&c);
            let rs = one_height_subtrees(&r);
            let unmatched: BTreeSet<SubtreeKey> = one_height_subtrees(&extra)
                .into_iter()
                .filter(|k| !cs.contains(k) && !rs.contains(k))
                .collect();
            // Unmatched subtrees in the candidate change nothing (the empty
            // reference convention is the one exception).
            prop_assume!(!rs.is_empty());
            let grown_c: BTreeSet<_> = cs.union(&unmatched).cloned().collect();
            prop_assert_eq!(tree_bleu_sets(&grown_c, &rs), tree_bleu_sets(&cs, &rs));
            // Unmatched subtrees in the reference never raise the score.
            let grown_r: BTreeSet<_> = rs.union(&unmatched).cloned().collect();
            prop_assert!(tree_bleu_sets(&cs, &grown_r) <= base);
        }

        #[test]
        fn subtree_count_bounded(tree in arb_tree()) {
            prop_assert!(one_height_subtrees(&tree).len() <= tree.internal_node_count());
        }

        #[test]
        fn depth_ignores_text_and_comments(n in 1usize..6, text in "[a-z ]{0,8}") {
            let plain: String = "<div>".repeat(n) + &"</div>".repeat(n);
            let noisy: String = format!("<!--x-->{}{}<!--y-->", format!("<div>{text}<!--c-->").repeat(n), "</div>".repeat(n));
            let a = parse_tag_tree(&plain).unwrap();
            let b = parse_tag_tree(&noisy).unwrap();
            prop_assert_eq!(a.depth(), b.depth());
        }
    }
}
