//! Selector matching for the subset needed to decide whether a CSS rule can
//! apply to a static document: type, `*`, `.class`, `#id`, `[attr]`,
//! `[attr=value]`, descendant and child combinators, and `,` grouping.
//!
//! Anything else (pseudo-classes, pseudo-elements, sibling combinators,
//! namespaces, other attribute operators) is rejected as unsupported rather
//! than guessed at.

use thiserror::Error;

use crate::html::{Document, NodeId};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unsupported selector {selector:?}: {reason}")]
pub struct SelectorUnsupported {
    pub selector: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AttrSel {
    name: String,
    value: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Compound {
    tag: Option<String>,
    ids: Vec<String>,
    classes: Vec<String>,
    attrs: Vec<AttrSel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Combinator {
    Descendant,
    Child,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Complex {
    /// Left to right; `combinators[i]` sits between `compounds[i]` and `compounds[i + 1]`.
    compounds: Vec<Compound>,
    combinators: Vec<Combinator>,
}

/// (id, class/attribute, type) counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Specificity(pub u32, pub u32, pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectorList {
    items: Vec<Complex>,
}

impl SelectorList {
    pub fn parse(text: &str) -> Result<SelectorList, SelectorUnsupported> {
        let unsupported = |reason: &str| SelectorUnsupported {
            selector: text.to_string(),
            reason: reason.to_string(),
        };
        let chars: Vec<char> = text.chars().collect();
        let mut p = Parser { chars, pos: 0 };
        let mut items = Vec::new();
        loop {
            items.push(p.complex().map_err(|r| unsupported(&r))?);
            p.skip_ws();
            match p.peek() {
                None => break,
                Some(',') => p.pos += 1,
                Some(c) => return Err(unsupported(&format!("unexpected {c:?}"))),
            }
        }
        Ok(SelectorList { items })
    }

    /// True iff any element of `doc` matches any selector in the list.
    pub fn matches_any(&self, doc: &Document) -> bool {
        let elements = doc.elements();
        self.items
            .iter()
            .any(|c| elements.iter().any(|&e| matches_complex(doc, e, c)))
    }

    /// Highest specificity among the selectors matching `el`, if any match.
    pub fn match_specificity(&self, doc: &Document, el: NodeId) -> Option<Specificity> {
        self.items
            .iter()
            .filter(|c| matches_complex(doc, el, c))
            .map(specificity)
            .max()
    }

    pub fn matches(&self, doc: &Document, el: NodeId) -> bool {
        self.items.iter().any(|c| matches_complex(doc, el, c))
    }
}

/// Does any element of `doc` match `selector`?
pub fn match_selector(selector: &str, doc: &Document) -> Result<bool, SelectorUnsupported> {
    Ok(SelectorList::parse(selector)?.matches_any(doc))
}

fn specificity(c: &Complex) -> Specificity {
    let mut s = Specificity::default();
    for comp in &c.compounds {
        s.0 += comp.ids.len() as u32;
        s.1 += (comp.classes.len() + comp.attrs.len()) as u32;
        s.2 += u32::from(comp.tag.is_some());
    }
    s
}

fn matches_complex(doc: &Document, el: NodeId, c: &Complex) -> bool {
    matches_from(doc, el, c, c.compounds.len() - 1)
}

fn matches_from(doc: &Document, el: NodeId, c: &Complex, idx: usize) -> bool {
    if !matches_compound(doc, el, &c.compounds[idx]) {
        return false;
    }
    if idx == 0 {
        return true;
    }
    let mut ancestors = doc.ancestors(el).filter(|&a| doc.element(a).is_some());
    match c.combinators[idx - 1] {
        Combinator::Child => ancestors.next().is_some_and(|p| matches_from(doc, p, c, idx - 1)),
        Combinator::Descendant => ancestors.any(|a| matches_from(doc, a, c, idx - 1)),
    }
}

fn matches_compound(doc: &Document, el: NodeId, comp: &Compound) -> bool {
    let Some(e) = doc.element(el) else {
        return false;
    };
    if let Some(tag) = &comp.tag {
        if !e.name.eq_ignore_ascii_case(tag) {
            return false;
        }
    }
    if !comp.ids.iter().all(|id| e.attr("id") == Some(id.as_str())) {
        return false;
    }
    if !comp.classes.iter().all(|cls| e.classes().any(|c| c == cls)) {
        return false;
    }
    comp.attrs.iter().all(|a| match (&a.value, e.attr(&a.name)) {
        (_, None) => false,
        (None, Some(_)) => true,
        (Some(want), Some(have)) => want == have,
    })
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) -> bool {
        let start = self.pos;
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
        self.pos > start
    }

    fn complex(&mut self) -> Result<Complex, String> {
        self.skip_ws();
        let mut compounds = vec![self.compound()?];
        let mut combinators = Vec::new();
        loop {
            let had_ws = self.skip_ws();
            match self.peek() {
                None | Some(',') => break,
                Some('>') => {
                    self.pos += 1;
                    self.skip_ws();
                    combinators.push(Combinator::Child);
                }
                Some('+') | Some('~') => return Err("sibling combinator".into()),
                Some(_) if had_ws => combinators.push(Combinator::Descendant),
                Some(c) => return Err(format!("unexpected {c:?}")),
            }
            compounds.push(self.compound()?);
        }
        Ok(Complex { compounds, combinators })
    }

    fn compound(&mut self) -> Result<Compound, String> {
        let mut comp = Compound::default();
        let start = self.pos;
        match self.peek() {
            Some('*') => {
                self.pos += 1;
            }
            Some(c) if is_ident_start(c) => {
                comp.tag = Some(self.ident()?.to_ascii_lowercase());
            }
            _ => {}
        }
        if self.peek() == Some('|') {
            return Err("namespace prefix".into());
        }
        loop {
            match self.peek() {
                Some('.') => {
                    self.pos += 1;
                    comp.classes.push(self.ident()?);
                }
                Some('#') => {
                    self.pos += 1;
                    comp.ids.push(self.ident()?);
                }
                Some('[') => {
                    self.pos += 1;
                    comp.attrs.push(self.attribute()?);
                }
                Some(':') => return Err("pseudo-class or pseudo-element".into()),
                _ => break,
            }
        }
        if self.pos == start {
            return Err(match self.peek() {
                Some(c) => format!("unexpected {c:?}"),
                None => "empty selector".into(),
            });
        }
        Ok(comp)
    }

    fn attribute(&mut self) -> Result<AttrSel, String> {
        self.skip_ws();
        let name = self.ident()?.to_ascii_lowercase();
        self.skip_ws();
        let value = match self.peek() {
            Some(']') => None,
            Some('=') => {
                self.pos += 1;
                self.skip_ws();
                let v = match self.peek() {
                    Some(q @ ('"' | '\'')) => self.string(q)?,
                    _ => self.ident()?,
                };
                self.skip_ws();
                Some(v)
            }
            Some('~' | '|' | '^' | '$' | '*') => return Err("attribute operator".into()),
            _ => return Err("malformed attribute selector".into()),
        };
        if self.peek() != Some(']') {
            return Err("attribute selector flags or junk".into());
        }
        self.pos += 1;
        Ok(AttrSel { name, value })
    }

    fn string(&mut self, quote: char) -> Result<String, String> {
        self.pos += 1;
        let mut out = String::new();
        while let Some(c) = self.peek() {
            self.pos += 1;
            if c == quote {
                return Ok(out);
            }
            if c == '\\' {
                out.push(self.escape()?);
            } else {
                out.push(c);
            }
        }
        Err("unterminated string".into())
    }

    fn ident(&mut self) -> Result<String, String> {
        let mut out = String::new();
        if self.peek() == Some('-') {
            out.push('-');
            self.pos += 1;
        }
        while let Some(c) = self.peek() {
            if c == '\\' {
                self.pos += 1;
                out.push(self.escape()?);
            } else if is_ident_char(c) {
                out.push(c);
                self.pos += 1;
            } else {
                break;
            }
        }
        if out.is_empty() || out == "-" {
            return Err("expected identifier".into());
        }
        Ok(out)
    }

    /// Consumes an escape body (the backslash is already consumed).
    fn escape(&mut self) -> Result<char, String> {
        let mut hex = String::new();
        while hex.len() < 6 && self.peek().is_some_and(|c| c.is_ascii_hexdigit()) {
            hex.push(self.peek().unwrap());
            self.pos += 1;
        }
        if !hex.is_empty() {
            if self.peek().is_some_and(char::is_whitespace) {
                self.pos += 1;
            }
            let cp = u32::from_str_radix(&hex, 16).unwrap_or(0xFFFD);
            return Ok(char::from_u32(cp).filter(|&c| c != '\0').unwrap_or('\u{FFFD}'));
        }
        match self.peek() {
            Some(c) => {
                self.pos += 1;
                Ok(c)
            }
            None => Err("dangling escape".into()),
        }
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '-' || c == '\\' || !c.is_ascii()
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-' || !c.is_ascii()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(html: &str) -> Document {
        Document::parse(html)
    }

    /// Brute force: enumerate every (ancestor, descendant) element pair.
    fn descendant_pair_exists(d: &Document, anc_tag: &str, desc_class: &str) -> bool {
        let els = d.elements();
        els.iter().any(|&a| {
            d.element(a).unwrap().name == anc_tag
                && els.iter().any(|&x| {
                    x != a && d.ancestors(x).any(|y| y == a) && d.element(x).unwrap().classes().any(|c| c == desc_class)
                })
        })
    }

    #[test]
    fn descendant_class() {
        let d = doc(r#"<html><body><div><span class="a">x</span></div></body></html>"#);
        assert!(match_selector("div .a", &d).unwrap());
        assert!(descendant_pair_exists(&d, "div", "a"));
        assert!(!match_selector("span .a", &d).unwrap());
        assert!(!descendant_pair_exists(&d, "span", "a"));
    }

    #[test]
    fn missing_id() {
        let d = doc(r#"<div id="yes"></div>"#);
        assert!(!match_selector("#nope", &d).unwrap());
        assert!(match_selector("#yes", &d).unwrap());
    }

    #[test]
    fn pseudo_is_unsupported() {
        let d = doc("<p>x</p>");
        let err = match_selector("p:hover", &d).unwrap_err();
        assert_eq!(err.selector, "p:hover");
        assert!(match_selector("p::before", &d).is_err());
        assert!(match_selector("p + p", &d).is_err());
        assert!(match_selector("p ~ p", &d).is_err());
        assert!(match_selector("[a^=b]", &d).is_err());
        assert!(match_selector("svg|rect", &d).is_err());
        assert!(match_selector("", &d).is_err());
    }

    #[test]
    fn child_versus_descendant() {
        let d = doc("<div><section><p>x</p></section></div>");
        assert!(match_selector("div p", &d).unwrap());
        assert!(!match_selector("div > p", &d).unwrap());
        assert!(match_selector("div>section>p", &d).unwrap());
        assert!(match_selector("html body div p", &d).unwrap());
    }

    #[test]
    fn grouping_and_universal() {
        let d = doc("<ul><li>x</li></ul>");
        assert!(match_selector("table, li", &d).unwrap());
        assert!(!match_selector("table, ol", &d).unwrap());
        assert!(match_selector("*", &d).unwrap());
        assert!(match_selector("ul > *", &d).unwrap());
    }

    #[test]
    fn attributes() {
        let d = doc(r#"<input type="text" disabled>"#);
        assert!(match_selector("[disabled]", &d).unwrap());
        assert!(match_selector("input[type=text]", &d).unwrap());
        assert!(match_selector(r#"input[type="text"]"#, &d).unwrap());
        assert!(!match_selector("input[type=radio]", &d).unwrap());
    }

    #[test]
    fn escaped_class_names() {
        let d = doc(r#"<div class="md:flex w-1/2"></div>"#);
        assert!(match_selector(r".md\:flex", &d).unwrap());
        assert!(match_selector(r".w-1\/2", &d).unwrap());
        assert!(match_selector(r".md\3a flex", &d).unwrap());
    }

    #[test]
    fn type_selectors_ignore_case() {
        let d = doc("<DIV></DIV>");
        assert!(match_selector("DiV", &d).unwrap());
    }

    #[test]
    fn specificity_order() {
        let d = doc(r#"<p id="x" class="a b">t</p>"#);
        let p = d
            .elements()
            .into_iter()
            .find(|&e| d.element(e).unwrap().name == "p")
            .unwrap();
        let s = SelectorList::parse("p, .a.b, #x").unwrap();
        assert_eq!(s.match_specificity(&d, p), Some(Specificity(1, 0, 0)));
        let t = SelectorList::parse("body p.a[id]").unwrap();
        assert_eq!(t.match_specificity(&d, p), Some(Specificity(0, 2, 2)));
    }
}
