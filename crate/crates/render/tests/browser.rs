//! These tests drive a real headless browser. They are skipped (with a note on
//! stderr) when none can be found.

use std::sync::atomic::{AtomicUsize, Ordering};

use webcurate_core::dom::{parse_tag_tree, TagTree};
use webcurate_core::layout::LayoutNode;
use webcurate_render::{find_browser, render_batch, RenderConfig, RenderJob, Renderer};

fn renderer(cfg: RenderConfig) -> Option<Renderer> {
    if find_browser(&cfg).is_err() {
        eprintln!("no browser available; skipping");
        return None;
    }
    Some(Renderer::new(cfg).expect("browser launches"))
}

fn close(a: &LayoutNode, b: &LayoutNode, tol: f64) -> bool {
    a.tag == b.tag
        && a.bbox.iter().zip(b.bbox).all(|(x, y)| (x - y).abs() <= tol)
        && a.children.len() == b.children.len()
        && a.children.iter().zip(&b.children).all(|(x, y)| close(x, y, tol))
}

#[test]
fn golden_div_layout() {
    let Some(mut r) = renderer(RenderConfig::default()) else {
        return;
    };
    let html = include_str!("fixtures/div_100x50.html");
    let golden: LayoutNode = serde_json::from_str(include_str!("fixtures/div_100x50.layout.json")).unwrap();
    let a = r.render("golden", html);
    assert!(a.render_ok, "{:?}", a.failure_reason);
    let layout = a.layout.unwrap();
    assert!(
        close(&layout, &golden, 1.0),
        "{}",
        serde_json::to_string(&layout).unwrap()
    );
    let div = &layout.children[0].children[0];
    assert_eq!(div.bbox, [8.0, 8.0, 100.0, 50.0]);
}

#[test]
fn blank_body_and_uniform_screenshot() {
    let Some(mut r) = renderer(RenderConfig::default()) else {
        return;
    };
    let a = r.render("blank", "<html><body></body></html>");
    let layout = a.layout.as_ref().unwrap();
    assert_eq!(layout.tag_tree(), TagTree::node("html", vec![TagTree::leaf("body")]));
    let img = image::load_from_memory(a.screenshot.as_ref().unwrap())
        .unwrap()
        .to_rgb8();
    assert_eq!(img.width(), 1280);
    let first = *img.get_pixel(0, 0);
    assert!(img.pixels().all(|p| *p == first));
}

#[test]
fn rerender_is_identical_and_matches_tag_tree() {
    let Some(mut r) = renderer(RenderConfig::default()) else {
        return;
    };
    let html = "<html><head><style>.c{color:#123456;padding:4px}</style></head><body>\
                <div class=c><h1>Title</h1><p>Some <b>bold</b> text</p><ul><li>a</li><li>b</li></ul></div>\
                <img src=\"https://example.com/logo.png\" width=\"40\" height=\"30\"></body></html>";
    let a = r.render("x", html);
    let b = r.render("x", html);
    assert!(a.render_ok);
    assert_eq!(a.layout, b.layout);
    assert_eq!(a.screenshot, b.screenshot);
    assert_eq!(a.substituted_images, 1);

    let mut expected = parse_tag_tree(html).unwrap();
    expected.children.retain(|c| c.name != "head");
    assert_eq!(a.layout.as_ref().unwrap().tag_tree(), expected);

    let page = a.page_size;
    for n in a.layout.as_ref().unwrap().walk() {
        let [x, y, w, h] = n.bbox;
        assert!(w >= 0.0 && h >= 0.0);
        assert!(
            x >= -1.0 && y >= -1.0 && x + w <= page[0] + 1.0 && y + h <= page[1] + 1.0,
            "{n:?}"
        );
    }
    let h1 = a
        .layout
        .unwrap()
        .walk()
        .into_iter()
        .find(|n| n.tag == "h1")
        .cloned()
        .unwrap();
    assert_eq!((h1.text.as_str(), h1.color), ("Title", Some([0x12, 0x34, 0x56])));
}

#[test]
fn blocked_remote_font_still_renders() {
    let Some(mut r) = renderer(RenderConfig::default()) else {
        return;
    };
    let html = "<html><head><style>@font-face{font-family:X;src:url(https://fonts.example.com/x.woff2)}\
                p{font-family:X}</style></head><body><p>text</p></body></html>";
    let a = r.render("font", html);
    assert!(a.render_ok, "{:?}", a.failure_reason);
}

#[test]
fn tall_pages_are_clipped() {
    let cfg = RenderConfig {
        max_height: 1000,
        ..Default::default()
    };
    let Some(mut r) = renderer(cfg) else { return };
    let a = r.render("tall", "<div style=\"height:3000px\"></div>");
    assert!(a.render_ok && a.clipped);
    let img = image::load_from_memory(a.screenshot.as_ref().unwrap()).unwrap();
    assert_eq!((img.width(), img.height()), (1280, 1000));
}

#[test]
fn batch_isolates_a_hanging_page() {
    let cfg = RenderConfig {
        timeout_ms: 3_000,
        ..Default::default()
    };
    if find_browser(&cfg).is_err() {
        return;
    }
    let mut jobs: Vec<RenderJob> = (0..4)
        .map(|i| RenderJob {
            id: format!("p{i}"),
            html: format!("<p>page {i}</p>"),
        })
        .collect();
    jobs.insert(
        2,
        RenderJob {
            id: "hang".into(),
            html: "<script>while(true){}</script><p>never</p>".into(),
        },
    );
    let seen = AtomicUsize::new(0);
    let out = render_batch(jobs, &cfg, 2, &|_| {
        seen.fetch_add(1, Ordering::SeqCst);
    })
    .unwrap();
    let ids: Vec<&str> = out.iter().map(|a| a.id.as_str()).collect();
    assert_eq!(ids, vec!["hang", "p0", "p1", "p2", "p3"]);
    assert_eq!(seen.load(Ordering::SeqCst), 5);
    assert_eq!(out.iter().filter(|a| a.render_ok).count(), 4);
    assert_eq!(out[0].failure_reason.as_deref(), Some("timeout"));
    assert!(out[0].screenshot.is_none() && out[0].layout.is_none());
}
