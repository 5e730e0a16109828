//! A small, forgiving stylesheet splitter.
//!
//! This does not tokenize CSS values; it only finds rule boundaries (respecting
//! strings, escapes and nesting) so rules can be kept or dropped whole and
//! written back out in a stable, compact form.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StyleRule {
    /// Selector text with whitespace runs collapsed.
    pub selector: String,
    /// Declaration block contents, trimmed.
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CssItem {
    Style(StyleRule),
    /// Conditional group rule whose block holds more rules (`@media`, `@supports`, ...).
    Group {
        name: String,
        prelude: String,
        rules: Vec<CssItem>,
    },
    /// At-rule whose block is kept opaque (`@font-face`, `@keyframes`, `@page`, ...).
    Opaque {
        name: String,
        prelude: String,
        body: String,
    },
    /// Block-less at-rule such as `@import` or `@charset`.
    Statement {
        name: String,
        prelude: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stylesheet {
    pub items: Vec<CssItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declaration {
    pub name: String,
    pub value: String,
    pub important: bool,
}

const GROUP_RULES: &[&str] = &[
    "media",
    "supports",
    "layer",
    "container",
    "document",
    "-moz-document",
    "scope",
];

impl Stylesheet {
    pub fn parse(text: &str) -> Stylesheet {
        let clean = strip_comments(text);
        let chars: Vec<char> = clean.chars().collect();
        let mut pos = 0;
        Stylesheet {
            items: parse_items(&chars, &mut pos),
        }
    }

    pub fn to_css(&self) -> String {
        let mut out = String::new();
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            write_item(item, &mut out);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Number of style rules, counting those nested in group rules.
    pub fn style_rule_count(&self) -> usize {
        count_style(&self.items)
    }
}

fn count_style(items: &[CssItem]) -> usize {
    items
        .iter()
        .map(|i| match i {
            CssItem::Style(_) => 1,
            CssItem::Group { rules, .. } => count_style(rules),
            _ => 0,
        })
        .sum()
}

fn write_item(item: &CssItem, out: &mut String) {
    match item {
        CssItem::Style(r) => {
            let _ = write!(out, "{}{{{}}}", r.selector, r.body);
        }
        CssItem::Group { name, prelude, rules } => {
            let _ = write!(out, "@{}", name);
            if !prelude.is_empty() {
                let _ = write!(out, " {}", prelude);
            }
            out.push('{');
            for r in rules {
                write_item(r, out);
            }
            out.push('}');
        }
        CssItem::Opaque { name, prelude, body } => {
            let _ = write!(out, "@{}", name);
            if !prelude.is_empty() {
                let _ = write!(out, " {}", prelude);
            }
            let _ = write!(out, "{{{}}}", body);
        }
        CssItem::Statement { name, prelude } => {
            let _ = write!(out, "@{}", name);
            if !prelude.is_empty() {
                let _ = write!(out, " {}", prelude);
            }
            out.push(';');
        }
    }
}

fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut it = text.chars().peekable();
    let mut quote: Option<char> = None;
    while let Some(c) = it.next() {
        match quote {
            Some(q) => {
                out.push(c);
                if c == '\\' {
                    if let Some(n) = it.next() {
                        out.push(n);
                    }
                } else if c == q {
                    quote = None;
                }
            }
            None => {
                if c == '/' && it.peek() == Some(&'*') {
                    it.next();
                    let mut prev = '\0';
                    for n in it.by_ref() {
                        if prev == '*' && n == '/' {
                            break;
                        }
                        prev = n;
                    }
                    out.push(' ');
                } else {
                    if c == '"' || c == '\'' {
                        quote = Some(c);
                    }
                    out.push(c);
                }
            }
        }
    }
    out
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reads up to (not including) the first top-level char in `stops`.
fn read_until(chars: &[char], pos: &mut usize, stops: &[char]) -> String {
    let mut out = String::new();
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    while *pos < chars.len() {
        let c = chars[*pos];
        if let Some(q) = quote {
            out.push(c);
            if c == '\\' && *pos + 1 < chars.len() {
                *pos += 1;
                out.push(chars[*pos]);
            } else if c == q {
                quote = None;
            }
            *pos += 1;
            continue;
        }
        if depth == 0 && stops.contains(&c) {
            break;
        }
        match c {
            '\\' => {
                out.push(c);
                if *pos + 1 < chars.len() {
                    *pos += 1;
                    out.push(chars[*pos]);
                }
            }
            '"' | '\'' => {
                quote = Some(c);
                out.push(c);
            }
            '(' | '[' => {
                depth += 1;
                out.push(c);
            }
            ')' | ']' => {
                depth = depth.saturating_sub(1);
                out.push(c);
            }
            _ => out.push(c),
        }
        *pos += 1;
    }
    out
}

/// Reads a `{...}` block; `pos` must sit on the opening brace. Returns the
/// inner text and leaves `pos` after the matching close (or at EOF).
fn read_block(chars: &[char], pos: &mut usize) -> String {
    debug_assert_eq!(chars.get(*pos), Some(&'{'));
    *pos += 1;
    let mut out = String::new();
    let mut depth = 1usize;
    let mut quote: Option<char> = None;
    while *pos < chars.len() {
        let c = chars[*pos];
        *pos += 1;
        if let Some(q) = quote {
            out.push(c);
            if c == '\\' && *pos < chars.len() {
                out.push(chars[*pos]);
                *pos += 1;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\\' => {
                out.push(c);
                if *pos < chars.len() {
                    out.push(chars[*pos]);
                    *pos += 1;
                }
            }
            '"' | '\'' => {
                quote = Some(c);
                out.push(c);
            }
            '{' => {
                depth += 1;
                out.push(c);
            }
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return out;
                }
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    out
}

fn parse_items(chars: &[char], pos: &mut usize) -> Vec<CssItem> {
    let mut items = Vec::new();
    loop {
        while *pos < chars.len() && chars[*pos].is_whitespace() {
            *pos += 1;
        }
        if *pos >= chars.len() {
            break;
        }
        match chars[*pos] {
            '}' | ';' => {
                *pos += 1;
            }
            '@' => {
                *pos += 1;
                let mut name = String::new();
                while *pos < chars.len() && (chars[*pos].is_alphanumeric() || chars[*pos] == '-' || chars[*pos] == '_')
                {
                    name.push(chars[*pos].to_ascii_lowercase());
                    *pos += 1;
                }
                let prelude = collapse_ws(&read_until(chars, pos, &['{', ';']));
                if *pos >= chars.len() || chars[*pos] == ';' {
                    *pos += 1;
                    items.push(CssItem::Statement { name, prelude });
                    continue;
                }
                let body = read_block(chars, pos);
                if GROUP_RULES.contains(&name.as_str()) {
                    let inner: Vec<char> = body.chars().collect();
                    let mut p = 0;
                    items.push(CssItem::Group {
                        name,
                        prelude,
                        rules: parse_items(&inner, &mut p),
                    });
                } else {
                    items.push(CssItem::Opaque {
                        name,
                        prelude,
                        body: body.trim().to_string(),
                    });
                }
            }
            _ => {
                let prelude = read_until(chars, pos, &['{', ';', '}']);
                if *pos < chars.len() && chars[*pos] == '{' {
                    let body = read_block(chars, pos);
                    let selector = collapse_ws(&prelude);
                    if !selector.is_empty() {
                        items.push(CssItem::Style(StyleRule {
                            selector,
                            body: body.trim().to_string(),
                        }));
                    }
                }
                // Garbage up to a stray ';' or '}' is dropped.
            }
        }
    }
    items
}

/// Splits a declaration block (or a `style` attribute) into declarations.
pub fn parse_declarations(body: &str) -> Vec<Declaration> {
    let clean = strip_comments(body);
    let chars: Vec<char> = clean.chars().collect();
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < chars.len() {
        let decl = read_until(&chars, &mut pos, &[';']);
        pos += 1;
        let Some((name, value)) = decl.split_once(':') else {
            continue;
        };
        let name = name.trim().to_ascii_lowercase();
        if name.is_empty() {
            continue;
        }
        let mut value = value.trim().to_string();
        let mut important = false;
        let lower = value.to_ascii_lowercase();
        if let Some(idx) = lower.rfind("!important") {
            if lower[idx + "!important".len()..].trim().is_empty() {
                important = true;
                value = value[..idx].trim().to_string();
            }
        }
        out.push(Declaration { name, value, important });
    }
    out
}

/// Parses a CSS length into pixels where that is decidable without layout
/// (`px`, unitless zero, `pt`, `in`, `cm`, `mm`).
pub fn length_px(value: &str) -> Option<f64> {
    let v = value.trim().to_ascii_lowercase();
    let split = v
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+'))
        .unwrap_or(v.len());
    let (num, unit) = v.split_at(split);
    let n: f64 = num.parse().ok()?;
    let scale = match unit.trim() {
        "" if n == 0.0 => 1.0,
        "" => return None,
        "px" => 1.0,
        "pt" => 96.0 / 72.0,
        "in" => 96.0,
        "cm" => 96.0 / 2.54,
        "mm" => 96.0 / 25.4,
        "em" | "rem" | "%" | "vh" | "vw" if n == 0.0 => 1.0,
        _ => return None,
    };
    Some(n * scale)
}
