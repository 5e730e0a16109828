//! Headless-browser rendering of purified pages.
//!
//! Each page is served into a fresh tab of a locally launched Chromium from a
//! reserved `.invalid` origin, driven over the DevTools protocol. Remote images are
//! answered with a local placeholder and every other remote request is
//! refused, so output depends only on the HTML and the browser build.

mod cdp;

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use webcurate_core::layout::{LayoutNode, RenderArtifact};

use cdp::Browser;

pub const BROWSER_ENV: &str = "WEBCURATE_BROWSER";

const WALKER_JS: &str = include_str!("../assets/walker.js");
const SETTLE_JS: &str =
    "document.fonts.ready.then(() => new Promise(r => requestAnimationFrame(() => requestAnimationFrame(() => r(1)))))";
const PLACEHOLDER_SIDE: u32 = 64;
const PLACEHOLDER_GRAY: u8 = 0xcc;

/// Binaries looked up on `PATH` when no browser is configured.
const PATH_CANDIDATES: &[&str] = &[
    "chromium",
    "chromium-browser",
    "google-chrome",
    "chrome",
    "headless_shell",
];
/// Fallback absolute locations.
const KNOWN_LOCATIONS: &[&str] = &[
    "/opt/chromium/webcurate-chrome",
    "/usr/bin/chromium",
    "/opt/google/chrome/chrome",
    "/Applications/Google Chrome.app/Contents/MacOS/Google Chrome",
];

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no browser binary found (set {BROWSER_ENV} or `browser` in the config)")]
    BrowserMissing,
    #[error("browser failed to start: {0}")]
    Launch(String),
    #[error("invalid render configuration: {0}")]
    Config(String),
    #[error("timeout")]
    Timeout,
    #[error("browser crashed: {0}")]
    Crashed(String),
    #[error("devtools protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Viewport and screenshot width in CSS pixels.
    pub width: u32,
    /// Initial viewport height before the page is measured.
    pub height: u32,
    /// Taller pages are cut here and flagged as clipped.
    pub max_height: u32,
    /// Budget for reaching DOMContentLoaded.
    pub timeout_ms: u64,
    /// Extra wait for the load event; on expiry the page is captured anyway.
    pub settle_ms: u64,
    pub browser: Option<PathBuf>,
    pub extra_args: Vec<String>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 1280,
            height: 800,
            max_height: 10_000,
            timeout_ms: 15_000,
            settle_ms: 3_000,
            browser: None,
            extra_args: Vec::new(),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.width == 0 || self.height == 0 || self.max_height == 0 {
            return Err(RenderError::Config("viewport dimensions must be positive".into()));
        }
        if self.timeout_ms == 0 {
            return Err(RenderError::Config("timeout_ms must be positive".into()));
        }
        Ok(())
    }
}

fn executable(p: &Path) -> bool {
    p.is_file()
}

/// Resolves the browser binary: config, then `$WEBCURATE_BROWSER`, then `PATH`,
/// then a few well-known install locations.
pub fn find_browser(cfg: &RenderConfig) -> Result<PathBuf, RenderError> {
    if let Some(p) = &cfg.browser {
        return if executable(p) {
            Ok(p.clone())
        } else {
            Err(RenderError::BrowserMissing)
        };
    }
    if let Some(p) = std::env::var_os(BROWSER_ENV).filter(|v| !v.is_empty()) {
        let p = PathBuf::from(p);
        return if executable(&p) {
            Ok(p)
        } else {
            Err(RenderError::BrowserMissing)
        };
    }
    if let Some(path) = std::env::var_os("PATH") {
        for dir in std::env::split_paths(&path) {
            for name in PATH_CANDIDATES {
                let p = dir.join(name);
                if executable(&p) {
                    return Ok(p);
                }
            }
        }
    }
    KNOWN_LOCATIONS
        .iter()
        .map(PathBuf::from)
        .find(|p| executable(p))
        .ok_or(RenderError::BrowserMissing)
}

fn placeholder_png() -> Vec<u8> {
    let img = image::RgbImage::from_pixel(PLACEHOLDER_SIDE, PLACEHOLDER_SIDE, image::Rgb([PLACEHOLDER_GRAY; 3]));
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .expect("encode placeholder");
    buf.into_inner()
}

#[derive(Deserialize)]
struct RawNode {
    tag: String,
    bbox: [f64; 4],
    #[serde(default)]
    text: String,
    #[serde(default)]
    color: Option<[u8; 3]>,
    children: Vec<RawNode>,
}

impl From<RawNode> for LayoutNode {
    fn from(r: RawNode) -> Self {
        let mut n =
            LayoutNode::new(r.tag, r.bbox).with_children(r.children.into_iter().map(LayoutNode::from).collect());
        n.text = r.text;
        n.color = r.color;
        n
    }
}

#[derive(Deserialize)]
struct Measured {
    root: Option<RawNode>,
    width: f64,
    height: f64,
}

/// Per-tab state while a page loads.
#[derive(Default)]
struct TabState {
    dom_ready: bool,
    loaded: bool,
    substituted: usize,
    crashed: bool,
    document_served: bool,
}

/// A single browser process rendering one page at a time.
pub struct Renderer {
    cfg: RenderConfig,
    binary: PathBuf,
    browser: Option<Browser>,
    placeholder_b64: String,
}

impl Renderer {
    pub fn new(cfg: RenderConfig) -> Result<Renderer, RenderError> {
        cfg.validate()?;
        let binary = find_browser(&cfg)?;
        let mut r = Renderer {
            cfg,
            binary,
            browser: None,
            placeholder_b64: base64::engine::general_purpose::STANDARD.encode(placeholder_png()),
        };
        r.ensure_browser()?;
        Ok(r)
    }

    pub fn config(&self) -> &RenderConfig {
        &self.cfg
    }

    fn ensure_browser(&mut self) -> Result<&mut Browser, RenderError> {
        let alive = self.browser.as_mut().is_some_and(Browser::is_alive);
        if !alive {
            self.browser = None;
            let b = Browser::launch(&self.binary, &self.cfg.extra_args, Duration::from_secs(30))?;
            self.browser = Some(b);
        }
        Ok(self.browser.as_mut().expect("browser present"))
    }

    /// Renders one page. A browser crash is retried once on a fresh process;
    /// everything else comes back as a failed artifact.
    pub fn render(&mut self, id: &str, html: &str) -> RenderArtifact {
        for attempt in 0..2 {
            match self.render_once(id, html) {
                Ok(a) => return a,
                Err(RenderError::Timeout) => {
                    // The tab may be wedged; start the next page on a fresh process.
                    self.browser = None;
                    return RenderArtifact::failed(id, "timeout");
                }
                Err(RenderError::Crashed(msg)) if attempt == 0 => {
                    log::warn!("{id}: browser crashed ({msg}); retrying on a fresh process");
                    self.browser = None;
                }
                Err(e) => {
                    self.browser = None;
                    return RenderArtifact::failed(id, e.to_string());
                }
            }
        }
        RenderArtifact::failed(id, "crash")
    }

    fn render_once(&mut self, id: &str, html: &str) -> Result<RenderArtifact, RenderError> {
        let cfg = self.cfg.clone();
        let placeholder = self.placeholder_b64.clone();
        let b = self.ensure_browser()?;
        let short = || Instant::now() + Duration::from_secs(10);

        let target = b.call(None, "Target.createTarget", json!({"url": "about:blank"}), short())?;
        let target_id = target["targetId"]
            .as_str()
            .ok_or_else(|| RenderError::Protocol("no targetId".into()))?
            .to_string();
        let result = (|| {
            let attached = b.call(
                None,
                "Target.attachToTarget",
                json!({"targetId": target_id, "flatten": true}),
                short(),
            )?;
            let session = attached["sessionId"]
                .as_str()
                .ok_or_else(|| RenderError::Protocol("no sessionId".into()))?
                .to_string();
            render_in_tab(b, &session, &cfg, &placeholder, id, html)
        })();
        if !matches!(result, Err(RenderError::Crashed(_))) {
            let _ = b.call(None, "Target.closeTarget", json!({"targetId": target_id}), short());
        }
        result
    }
}

/// Origin the page document is served from; nothing else on it exists.
const PAGE_URL: &str = "http://page.webcurate.invalid/";

/// One tab while a page loads and is captured.
struct Tab<'a> {
    b: &'a mut Browser,
    session: String,
    placeholder: &'a str,
    /// Base64 of the page document, answered once for the main navigation.
    document: String,
    st: TabState,
}

impl Tab<'_> {
    fn handle(&mut self, events: Vec<Value>) -> Result<(), RenderError> {
        for ev in events {
            let method = ev["method"].as_str().unwrap_or("");
            let for_us = ev["sessionId"].as_str() == Some(self.session.as_str());
            match method {
                "Page.domContentEventFired" if for_us => self.st.dom_ready = true,
                "Page.loadEventFired" if for_us => self.st.loaded = true,
                "Inspector.targetCrashed" if for_us => self.st.crashed = true,
                "Target.detachedFromTarget" if ev["params"]["sessionId"].as_str() == Some(self.session.as_str()) => {
                    self.st.crashed = true
                }
                "Fetch.requestPaused" if for_us => self.answer(&ev["params"])?,
                _ => {}
            }
        }
        if self.st.crashed {
            return Err(RenderError::Crashed("renderer process gone".into()));
        }
        Ok(())
    }

    fn answer(&mut self, p: &Value) -> Result<(), RenderError> {
        let req_id = p["requestId"].clone();
        let session = Some(self.session.as_str());
        let fulfill = |mime: &str, body: &str| {
            json!({
                "requestId": req_id,
                "responseCode": 200,
                "responseHeaders": [{"name": "Content-Type", "value": mime}],
                "body": body,
            })
        };
        if p["resourceType"] == "Document" && p["request"]["url"] == PAGE_URL && !self.st.document_served {
            self.st.document_served = true;
            let msg = fulfill("text/html; charset=utf-8", &self.document);
            self.b.notify(session, "Fetch.fulfillRequest", msg)
        } else if p["resourceType"] == "Image" {
            self.st.substituted += 1;
            let msg = fulfill("image/png", self.placeholder);
            self.b.notify(session, "Fetch.fulfillRequest", msg)
        } else {
            self.b.notify(
                session,
                "Fetch.failRequest",
                json!({"requestId": req_id, "errorReason": "BlockedByClient"}),
            )
        }
    }

    /// Runs a session command, servicing events while waiting for its answer:
    /// a navigation only completes once its document request is fulfilled.
    fn call(&mut self, method: &str, params: Value, deadline: Instant) -> Result<Value, RenderError> {
        let id = self.b.send(Some(&self.session), method, params)?;
        loop {
            let msg = self.b.read(deadline)?;
            match msg.get("id").and_then(Value::as_u64) {
                Some(i) if i == id => {
                    if let Some(err) = msg.get("error") {
                        return Err(RenderError::Protocol(format!("{method}: {err}")));
                    }
                    return Ok(msg.get("result").cloned().unwrap_or(Value::Null));
                }
                Some(_) => {}
                None => self.handle(vec![msg])?,
            }
        }
    }

    fn wait_until(&mut self, deadline: Instant, done: fn(&TabState) -> bool) -> Result<(), RenderError> {
        while !done(&self.st) {
            let ev = self.b.next_event(deadline)?;
            self.handle(vec![ev])?;
        }
        Ok(())
    }

    fn measure(&mut self, deadline: Instant) -> Result<Measured, RenderError> {
        let r = self.call(
            "Runtime.evaluate",
            json!({"expression": WALKER_JS, "returnByValue": true}),
            deadline,
        )?;
        let s = r["result"]["value"]
            .as_str()
            .ok_or_else(|| RenderError::Protocol(format!("layout walker returned {}", r["result"])))?;
        serde_json::from_str(s).map_err(|e| RenderError::Protocol(e.to_string()))
    }
}

fn render_in_tab(
    b: &mut Browser,
    session: &str,
    cfg: &RenderConfig,
    placeholder: &str,
    id: &str,
    html: &str,
) -> Result<RenderArtifact, RenderError> {
    let mut tab = Tab {
        b,
        session: session.to_string(),
        placeholder,
        document: base64::engine::general_purpose::STANDARD.encode(html),
        st: TabState::default(),
    };
    let step = || Instant::now() + Duration::from_millis(cfg.timeout_ms.max(10_000));
    let metrics = |h: u32| json!({"width": cfg.width, "height": h, "deviceScaleFactor": 1, "mobile": false});

    tab.call("Emulation.setDeviceMetricsOverride", metrics(cfg.height), step())?;
    tab.call(
        "Fetch.enable",
        json!({"patterns": [{"urlPattern": "*", "requestStage": "Request"}]}),
        step(),
    )?;
    tab.call("Page.enable", json!({}), step())?;
    tab.call("Animation.enable", json!({}), step())?;
    tab.call("Animation.setPlaybackRate", json!({"playbackRate": 0}), step())?;

    let nav_deadline = Instant::now() + Duration::from_millis(cfg.timeout_ms);
    let nav = tab.call("Page.navigate", json!({"url": PAGE_URL}), nav_deadline)?;
    if let Some(err) = nav["errorText"].as_str() {
        return Err(RenderError::Protocol(format!("navigation failed: {err}")));
    }
    tab.wait_until(nav_deadline, |s| s.dom_ready)?;
    let settle = Instant::now() + Duration::from_millis(cfg.settle_ms);
    match tab.wait_until(settle, |s| s.loaded) {
        Ok(()) | Err(RenderError::Timeout) => {}
        Err(e) => return Err(e),
    }
    tab.call(
        "Runtime.evaluate",
        json!({"expression": SETTLE_JS, "awaitPromise": true}),
        step(),
    )?;

    // Grow the viewport to the full page so layout and screenshot agree.
    let first = tab.measure(step())?;
    let full = first.height.ceil().max(1.0) as u32;
    let clipped = full > cfg.max_height;
    let capture_h = full.min(cfg.max_height);
    tab.call("Emulation.setDeviceMetricsOverride", metrics(capture_h), step())?;
    tab.call(
        "Runtime.evaluate",
        json!({"expression": SETTLE_JS, "awaitPromise": true}),
        step(),
    )?;
    let m = tab.measure(step())?;

    let shot = tab.call(
        "Page.captureScreenshot",
        json!({
            "format": "png",
            "fromSurface": true,
            "clip": {"x": 0, "y": 0, "width": cfg.width, "height": capture_h, "scale": 1},
        }),
        step(),
    )?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(shot["data"].as_str().unwrap_or(""))
        .map_err(|e| RenderError::Protocol(e.to_string()))?;

    Ok(RenderArtifact {
        id: id.to_string(),
        screenshot: Some(png),
        layout: m.root.map(LayoutNode::from),
        page_size: [m.width.max(cfg.width as f64), m.height.min(cfg.max_height as f64)],
        render_ok: true,
        failure_reason: None,
        clipped,
        substituted_images: tab.st.substituted,
    })
}

/// A page to render.
#[derive(Debug, Clone)]
pub struct RenderJob {
    pub id: String,
    pub html: String,
}

/// Renders `jobs` on `pool_size` independent browser processes. `on_done`
/// sees every artifact as it completes (from worker threads); the returned
/// list is sorted by id. Startup problems (bad config, missing binary) are
/// reported before any page is taken.
pub fn render_batch(
    jobs: Vec<RenderJob>,
    cfg: &RenderConfig,
    pool_size: usize,
    on_done: &(dyn Fn(&RenderArtifact) + Sync),
) -> Result<Vec<RenderArtifact>, RenderError> {
    if pool_size == 0 {
        return Err(RenderError::Config("pool_size must be at least 1".into()));
    }
    cfg.validate()?;
    find_browser(cfg)?;
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let workers = pool_size.min(jobs.len());
    let mut renderers = Vec::with_capacity(workers);
    for _ in 0..workers {
        renderers.push(Renderer::new(cfg.clone())?);
    }
    let queue = Mutex::new(jobs.into_iter());
    let (tx, rx) = mpsc::channel();
    thread::scope(|s| {
        for mut r in renderers {
            let tx = tx.clone();
            let queue = &queue;
            s.spawn(move || loop {
                let job = queue.lock().expect("job queue").next();
                let Some(job) = job else { break };
                let art = r.render(&job.id, &job.html);
                on_done(&art);
                if tx.send(art).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut out: Vec<RenderArtifact> = rx.into_iter().collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
