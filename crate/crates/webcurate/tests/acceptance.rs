//! Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails. Browser-dependent checks report SKIP when
//! no browser can be found.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use webcurate::benchmark::{run_benchmark, BenchConfig};
use webcurate::config::PipelineConfig;
use webcurate::pipeline::run_pipeline;
use webcurate_core::css::{CssItem, Stylesheet};
use webcurate_core::curate::{corpus_stats, partition, DatasetEntry, PartitionConfig, Split, TEST_MIN_SCORE};
use webcurate_core::dom::code_stats;
use webcurate_core::eval::EchoGenerator;
use webcurate_core::html::{Document, NodeData};
use webcurate_core::ingest::{ingest_dir, RawPage};
use webcurate_core::layout::LayoutNode;
use webcurate_core::purify::{cleanse, length_filter, LengthGate, ALLOWED_ATTRIBUTES};
use webcurate_core::quality;
use webcurate_core::safety::{bad_words_pass, nsfw_pass, threshold_sweep, SweepSample, MAX_BAD_WORDS, NSFW_THRESHOLD};
use webcurate_core::selector::SelectorList;
use webcurate_core::service::ThumbnailEmbedder;
use webcurate_core::{tree_bleu, CodeStats, Gpt2Tokenizer, MeanStd, TagTree};
use webcurate_render::{RenderConfig, Renderer};

enum Outcome {
    Pass(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn within(limit: Duration, started: Instant) -> String {
    let took = started.elapsed();
    assert!(took < limit, "took {took:.2?}, limit {limit:?}");
    format!("{took:.2?}")
}

// TreeBLEU against a brute-force count.

const NAMES: [&str; 5] = ["div", "p", "span", "a", "li"];
const OTHER_NAMES: [&str; 4] = ["table", "tr", "td", "th"];

fn random_tree(rng: &mut StdRng, names: &[&str], budget: &mut usize) -> TagTree {
    *budget -= 1;
    let name = names[rng.random_range(0..names.len())];
    let mut children = Vec::new();
    while *budget > 0 && rng.random_bool(0.55) {
        children.push(random_tree(rng, names, budget));
    }
    TagTree::node(name, children)
}

fn tree(rng: &mut StdRng, names: &[&str], min_nodes: usize) -> TagTree {
    loop {
        let mut budget = rng.random_range(1..=12usize);
        let t = random_tree(rng, names, &mut budget);
        if t.node_count() >= min_nodes {
            return t;
        }
    }
}

/// Every (name, ordered child names) pair in the tree, duplicates included.
fn all_parents(t: &TagTree, out: &mut Vec<(String, Vec<String>)>) {
    if !t.children.is_empty() {
        out.push((t.name.clone(), t.children.iter().map(|c| c.name.clone()).collect()));
    }
    for c in &t.children {
        all_parents(c, out);
    }
}

fn brute_force(cand: &TagTree, reference: &TagTree) -> f64 {
    let (mut c, mut r) = (Vec::new(), Vec::new());
    all_parents(cand, &mut c);
    all_parents(reference, &mut r);
    let mut distinct: Vec<(String, Vec<String>)> = Vec::new();
    for x in r {
        if !distinct.contains(&x) {
            distinct.push(x);
        }
    }
    if distinct.is_empty() {
        return if c.is_empty() { 1.0 } else { 0.0 };
    }
    let hit = distinct.iter().filter(|x| c.contains(x)).count();
    hit as f64 / distinct.len() as f64
}

fn treebleu_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = StdRng::seed_from_u64(7);
    for i in 0..1000 {
        let a = tree(&mut rng, &NAMES, 1);
        let b = tree(&mut rng, &NAMES, 1);
        assert_eq!(tree_bleu(&a, &b), brute_force(&a, &b), "pair {i}: {a:?} vs {b:?}");
        assert_eq!(tree_bleu(&a, &a), 1.0, "identity {i}");
        let x = tree(&mut rng, &NAMES, 2);
        let y = tree(&mut rng, &OTHER_NAMES, 2);
        assert_eq!(tree_bleu(&x, &y), 0.0, "disjoint {i}");
    }
    Outcome::Pass(format!("1000 pairs, {}", within(Duration::from_secs(5), t0)))
}

fn treebleu_worked_example() -> Outcome {
    let l = TagTree::leaf;
    let cand = TagTree::node(
        "html",
        vec![TagTree::node(
            "body",
            vec![TagTree::node("div", vec![l("p")]), l("div")],
        )],
    );
    let reference = TagTree::node(
        "html",
        vec![TagTree::node("body", vec![TagTree::node("div", vec![l("p")])])],
    );
    let v = tree_bleu(&cand, &reference);
    assert_eq!(v, 2.0 / 3.0);
    Outcome::Pass(format!("{v:.6}"))
}

// Purifier contract on the fixture corpus.

fn style_rules_all_match(items: &[CssItem], doc: &Document, checked: &mut usize) {
    for item in items {
        match item {
            CssItem::Style(rule) => {
                if let Ok(list) = SelectorList::parse(&rule.selector) {
                    *checked += 1;
                    assert!(
                        list.matches_any(doc),
                        "retained rule {:?} matches nothing",
                        rule.selector
                    );
                }
            }
            CssItem::Group { rules, .. } => style_rules_all_match(rules, doc, checked),
            _ => {}
        }
    }
}

fn check_clean(html: &str, id: &str) -> usize {
    let doc = Document::parse(html);
    let mut checked = 0;
    for n in doc.descendants(doc.root()) {
        match &doc.node(n).data {
            NodeData::Comment(_) => panic!("{id}: comment survived"),
            NodeData::Element(el) => {
                assert!(
                    !el.is_html("script") && !el.is_html("meta"),
                    "{id}: <{}> survived",
                    el.name
                );
                for a in &el.attrs {
                    assert!(
                        ALLOWED_ATTRIBUTES.contains(&a.name.as_str()),
                        "{id}: attribute {} survived",
                        a.name
                    );
                }
                if el.is_html("style") {
                    let sheet = Stylesheet::parse(&doc.text_content(n));
                    style_rules_all_match(&sheet.items, &doc, &mut checked);
                }
            }
            _ => {}
        }
    }
    checked
}

fn page_with(html_len: usize, css_len: usize) -> RawPage {
    use webcurate_core::ingest::{CssOrigin, CssSource};
    let css = CssSource {
        origin: CssOrigin::InlineStyleTag,
        text: "x".repeat(css_len),
        unresolved: false,
    };
    RawPage::new("https://example.com/", "h".repeat(html_len), vec![css], 0)
}

fn purifier_contract() -> Outcome {
    let t0 = Instant::now();
    let pages = ingest_dir(&common::fixture_pages()).unwrap().pages;
    assert_eq!(pages.len(), 50);
    let mut rules = 0;
    for p in &pages {
        let once = cleanse(p).unwrap();
        let again = cleanse(&RawPage::from_html(p.url.clone(), once.html.clone(), p.fetched_at)).unwrap();
        assert_eq!(once.html, again.html, "{}: second pass changed the output", p.url);
        rules += check_clean(&once.html, &p.url);
    }
    assert!(rules > 0);

    let gate = LengthGate::default();
    let pass = |h, c| length_filter(&page_with(h, c), &gate).pass;
    assert!(!pass(639, 1000) && pass(640, 1000) && pass(10240, 1000) && !pass(10241, 1000));
    assert!(!pass(1000, 639) && pass(1000, 640) && pass(1000, 20480) && !pass(1000, 20481));
    Outcome::Pass(format!(
        "50 pages, {rules} supported rules matched, {}",
        within(Duration::from_secs(10), t0)
    ))
}

// Filter constants.

fn threshold_constants() -> Outcome {
    let below = |x: f64| f64::from_bits(x.to_bits() - 1);
    assert_eq!(quality::KEEP_THRESHOLD, 2.0);
    assert!(quality::keep(2.0) && !quality::keep(below(2.0)));
    assert_eq!(NSFW_THRESHOLD, 0.04);
    assert!(!nsfw_pass(0.04, NSFW_THRESHOLD) && nsfw_pass(below(0.04), NSFW_THRESHOLD));
    assert_eq!(MAX_BAD_WORDS, 20);
    assert!(bad_words_pass(20, MAX_BAD_WORDS) && !bad_words_pass(21, MAX_BAD_WORDS));

    let mut rng = StdRng::seed_from_u64(3);
    let samples: Vec<SweepSample> = (0..500)
        .map(|_| SweepSample {
            nsfw_score: rng.random_range(0.0..=1.0),
            bad_word_count: rng.random_range(0..40),
            harmful: None,
        })
        .collect();
    let rows = threshold_sweep(&samples, &[0.04, 1.0], MAX_BAD_WORDS);
    assert_eq!(rows[1].retention_ratio, 100.0);
    assert!(rows[0].retention_ratio < 100.0);
    Outcome::Pass("2.0 / 0.04 / >20 / sweep at 1.00 retains 100.00%".into())
}

// Partition law.

fn synthetic_entries(n: usize, seed: u64) -> Vec<DatasetEntry> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let token_len = rng.random_range(1..6000);
            DatasetEntry {
                id: format!("e{i:05}"),
                html: String::new(),
                screenshot_ref: format!("e{i}.png").into(),
                layout_ref: format!("e{i}.json").into(),
                score: (rng.random_range(0..=50) as f64) / 10.0,
                token_len,
                split: if rng.random_bool(0.05) {
                    Split::Excluded
                } else {
                    Split::Train
                },
                stats: CodeStats {
                    token_len,
                    ..Default::default()
                },
            }
        })
        .collect()
}

fn partition_law() -> Outcome {
    let t0 = Instant::now();
    let cfg = PartitionConfig::default();
    let original = synthetic_entries(3000, 11);
    let mut a = original.clone();
    let report = partition(&mut a, &cfg, &BTreeSet::new());
    let mut b = original.clone();
    assert_eq!(partition(&mut b, &cfg, &BTreeSet::new()), report);
    assert_eq!(a, b, "same seed, different assignment");

    for (before, after) in original.iter().zip(&a) {
        match after.split {
            Split::Excluded => assert_eq!(before.split, Split::Excluded),
            Split::Train => assert_ne!(before.split, Split::Excluded),
            s => {
                assert_ne!(before.split, Split::Excluded);
                assert!(
                    after.score > TEST_MIN_SCORE,
                    "{} in {s} with score {}",
                    after.id,
                    after.score
                );
                assert_eq!(Split::for_tokens(after.token_len), Some(s));
            }
        }
    }
    for s in Split::TEST {
        let eligible = original
            .iter()
            .filter(|e| {
                e.split != Split::Excluded && e.score > TEST_MIN_SCORE && Split::for_tokens(e.token_len) == Some(s)
            })
            .count();
        let got = a.iter().filter(|e| e.split == s).count();
        assert_eq!(got, eligible.min(cfg.per_split), "{s}");
        assert_eq!(report.ranges[&s].count, got);
    }
    let table = report.table();
    print!("{}", table.lines().map(|l| format!("      {l}\n")).collect::<String>());
    Outcome::Pass(format!("3000 entries, {}", within(Duration::from_secs(5), t0)))
}

// Corpus statistics.

fn stats_fixtures() -> Outcome {
    let tok = Gpt2Tokenizer::embedded();
    let a = code_stats("<html><head></head><body><div><p>hi</p></div></body></html>", tok).unwrap();
    let b = code_stats("<html><body><a></a><a></a></body></html>", tok).unwrap();
    assert_eq!((a.tag_count, a.unique_tag_count, a.dom_depth), (5, 5, 4));
    assert_eq!((b.tag_count, b.unique_tag_count, b.dom_depth), (4, 3, 3));

    assert_eq!(MeanStd::of(&[100.0, 300.0]).unwrap().fmt_int(), "200±100");
    let entry = |id: &str, stats: CodeStats| DatasetEntry {
        id: id.into(),
        html: String::new(),
        screenshot_ref: Default::default(),
        layout_ref: Default::default(),
        score: 0.0,
        token_len: stats.token_len,
        split: Split::Train,
        stats,
    };
    let csv = corpus_stats(&[entry("a", a), entry("b", b)]).to_csv();
    let all = csv.lines().nth(1).unwrap();
    let cells: Vec<&str> = all.split(',').collect();
    assert_eq!(&cells[..2], ["all", "2"]);
    for c in &cells[2..] {
        let (m, s) = c.split_once('±').unwrap_or_else(|| panic!("cell {c:?}"));
        assert!(m.parse::<i64>().is_ok() && s.parse::<i64>().is_ok(), "cell {c:?}");
    }
    Outcome::Pass(format!("(5,5,4) (4,3,3); all row {all}"))
}

// End-to-end with a real browser.

fn end_to_end_echo() -> Outcome {
    if !common::browser_available() {
        return Outcome::Skip("no browser".into());
    }
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.jsonl");
    common::raw_manifest(20, &raw);
    let mut cfg = PipelineConfig::default();
    cfg.score.scorer = "mock:4.5".into();
    cfg.safety.nsfw = "mock".into();
    cfg.dedup.embedder = "mock".into();
    let work = dir.path().join("work");
    let out = run_pipeline(&cfg, &raw, &work).unwrap();
    assert!(out.funnel.is_conserved(), "{}", out.funnel.to_text());
    assert_eq!(out.funnel.input, 20);
    assert!(!out.entries.is_empty());

    let bench = BenchConfig {
        render: RenderConfig::default(),
        workers: 2,
        journal: None,
    };
    let report = run_benchmark(&out.entries, "all", &EchoGenerator, &ThumbnailEmbedder, &bench, &work).unwrap();
    assert_eq!(report.per_sample.len(), out.entries.len());
    let mut worst_visual: f64 = 1.0;
    for m in &report.per_sample {
        assert!(m.failure.is_none(), "{}: {:?}", m.id, m.failure);
        assert_eq!(m.treebleu, Some(1.0), "{}", m.id);
        let v = m.visual.unwrap();
        assert!(v >= 0.99, "{}: visual {v}", m.id);
        worst_visual = worst_visual.min(v);
    }
    Outcome::Pass(format!(
        "{} samples, min visual {worst_visual:.4}, funnel {}→{}, {}",
        report.per_sample.len(),
        out.funnel.input,
        out.funnel.output,
        within(Duration::from_secs(180), t0)
    ))
}

fn close(a: &LayoutNode, b: &LayoutNode, tol: f64) -> bool {
    a.tag == b.tag
        && a.bbox.iter().zip(b.bbox).all(|(x, y)| (x - y).abs() <= tol)
        && a.children.len() == b.children.len()
        && a.children.iter().zip(&b.children).all(|(x, y)| close(x, y, tol))
}

fn golden_layout() -> Outcome {
    if !common::browser_available() {
        return Outcome::Skip("no browser".into());
    }
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../render/tests/fixtures");
    let html = std::fs::read_to_string(fixtures.join("div_100x50.html")).unwrap();
    let golden: LayoutNode =
        serde_json::from_str(&std::fs::read_to_string(fixtures.join("div_100x50.layout.json")).unwrap()).unwrap();
    let mut r = Renderer::new(RenderConfig::default()).unwrap();
    let a = r.render("golden", &html);
    assert!(a.render_ok, "{:?}", a.failure_reason);
    let layout = a.layout.unwrap();
    assert!(
        close(&layout, &golden, 1.0),
        "{}",
        serde_json::to_string(&layout).unwrap()
    );
    let div = layout.walk().into_iter().find(|n| n.tag == "div").unwrap().bbox;
    assert!(
        div.iter()
            .zip([8.0, 8.0, 100.0, 50.0])
            .all(|(x, y)| (x - y).abs() <= 1.0),
        "{div:?}"
    );
    Outcome::Pass(format!("div bbox {div:?}"))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("treebleu-oracle", treebleu_oracle),
        ("treebleu-worked-example", treebleu_worked_example),
        ("purifier-contract", purifier_contract),
        ("threshold-constants", threshold_constants),
        ("partition-law", partition_law),
        ("stats-fixtures", stats_fixtures),
        ("end-to-end-echo", end_to_end_echo),
        ("golden-layout", golden_layout),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in checks {
        match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(Outcome::Pass(note)) => println!("PASS {name}: {note}"),
            Ok(Outcome::Skip(why)) => println!("SKIP {name}: {why}"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
