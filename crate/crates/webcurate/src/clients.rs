//! HTTP clients for the external models, plus the built-in stand-ins that
//! service specs can name instead of a URL.
//!
//! Scorer and NSFW detector: `POST` of the PNG bytes, answer is one decimal
//! number. Embedder: `POST` of the PNG bytes, answer is a JSON array of
//! numbers or `{"embedding": [...]}`. Generator: a chat-completions endpoint.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use webcurate_core::eval::{EchoGenerator, EmptyGenerator, GenerationRequest, Generator, GeneratorError};
use webcurate_core::service::{
    ImageEmbedder, NsfwDetector, QualityScorer, RetryPolicy, ServiceError, ThumbnailEmbedder,
};

use crate::config::ServicesConfig;

#[derive(Debug, Clone, PartialEq)]
enum Spec {
    Http(String),
    Mock(Option<f64>),
    Thumbnail,
}

fn parse_spec(spec: &str) -> Result<Spec, String> {
    let s = spec.trim();
    if s.starts_with("http://") || s.starts_with("https://") {
        return Ok(Spec::Http(s.to_string()));
    }
    if s == "thumbnail" {
        return Ok(Spec::Thumbnail);
    }
    if s == "mock" {
        return Ok(Spec::Mock(None));
    }
    if let Some(v) = s.strip_prefix("mock:") {
        return v
            .parse::<f64>()
            .map(|v| Spec::Mock(Some(v)))
            .map_err(|_| format!("bad mock value in service spec {spec:?}"));
    }
    Err(format!(
        "unrecognized service spec {spec:?} (expected an http(s) URL, mock, mock:<value> or thumbnail)"
    ))
}

/// Validates a service spec. `thumbnail` is only meaningful for embeddings.
pub fn check_spec(spec: &str, embedder: bool) -> Result<(), String> {
    match parse_spec(spec)? {
        Spec::Thumbnail if !embedder => Err(format!("{spec:?} is only valid for the embedder")),
        _ => Ok(()),
    }
}

fn http_client(svc: &ServicesConfig) -> Result<Client, String> {
    Client::builder()
        .timeout(Duration::from_millis(svc.timeout_ms))
        .build()
        .map_err(|e| e.to_string())
}

struct HttpService {
    url: String,
    client: Client,
}

impl HttpService {
    fn post_png(&self, png: &[u8]) -> Result<String, ServiceError> {
        let resp = self
            .client
            .post(&self.url)
            .header("Content-Type", "image/png")
            .body(png.to_vec())
            .send()
            .map_err(|e| ServiceError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ServiceError::Unavailable(e.to_string()))?;
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(ServiceError::Unavailable(format!("{status}: {}", body.trim())));
        }
        if !status.is_success() {
            return Err(ServiceError::Protocol(format!("{status}: {}", body.trim())));
        }
        Ok(body)
    }

    fn post_number(&self, png: &[u8]) -> Result<f64, ServiceError> {
        let body = self.post_png(png)?;
        body.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| ServiceError::Protocol(format!("expected a number, got {:?}", truncate(&body, 80))))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

struct HttpScorer(HttpService);
struct HttpNsfw(HttpService);
struct HttpEmbedder(HttpService);

impl QualityScorer for HttpScorer {
    fn score(&self, png: &[u8]) -> Result<f64, ServiceError> {
        self.0.post_number(png)
    }
}

impl NsfwDetector for HttpNsfw {
    fn nsfw_score(&self, png: &[u8]) -> Result<f64, ServiceError> {
        self.0.post_number(png)
    }
}

impl ImageEmbedder for HttpEmbedder {
    fn embed(&self, png: &[u8]) -> Result<Vec<f32>, ServiceError> {
        let body = self.0.post_png(png)?;
        let v: Value = serde_json::from_str(&body).map_err(|e| ServiceError::Protocol(e.to_string()))?;
        let arr = v.get("embedding").unwrap_or(&v);
        arr.as_array()
            .and_then(|a| {
                a.iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<Vec<_>>>()
            })
            .filter(|a| !a.is_empty())
            .ok_or_else(|| ServiceError::Protocol("expected a non-empty array of numbers".into()))
    }
}

/// Deterministic pseudo-score in `[0, 1)` from the image bytes.
fn digest_unit(png: &[u8]) -> f64 {
    let d = Sha256::digest(png);
    let n = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    (n >> 11) as f64 / (1u64 << 53) as f64
}

/// Stand-in scorer: a fixed value, or a pseudo-random one in `[0, 5)` derived
/// from the screenshot bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockScorer(pub Option<f64>);

impl QualityScorer for MockScorer {
    fn score(&self, png: &[u8]) -> Result<f64, ServiceError> {
        Ok(self.0.unwrap_or_else(|| digest_unit(png) * 5.0))
    }
}

/// Stand-in NSFW detector: a fixed value, or 0 (everything is clean).
#[derive(Debug, Clone, Copy, Default)]
pub struct MockNsfw(pub Option<f64>);

impl NsfwDetector for MockNsfw {
    fn nsfw_score(&self, _png: &[u8]) -> Result<f64, ServiceError> {
        Ok(self.0.unwrap_or(0.0))
    }
}

pub fn scorer(spec: &str, svc: &ServicesConfig) -> Result<Box<dyn QualityScorer>, String> {
    match parse_spec(spec)? {
        Spec::Http(url) => Ok(Box::new(HttpScorer(HttpService {
            url,
            client: http_client(svc)?,
        }))),
        Spec::Mock(v) => Ok(Box::new(MockScorer(v))),
        Spec::Thumbnail => Err(format!("{spec:?} is not a scorer")),
    }
}

pub fn nsfw_detector(spec: &str, svc: &ServicesConfig) -> Result<Box<dyn NsfwDetector>, String> {
    match parse_spec(spec)? {
        Spec::Http(url) => Ok(Box::new(HttpNsfw(HttpService {
            url,
            client: http_client(svc)?,
        }))),
        Spec::Mock(v) => Ok(Box::new(MockNsfw(v))),
        Spec::Thumbnail => Err(format!("{spec:?} is not an NSFW detector")),
    }
}

/// `mock` and `thumbnail` both select the local thumbnail embedding.
pub fn embedder(spec: &str, svc: &ServicesConfig) -> Result<Box<dyn ImageEmbedder>, String> {
    match parse_spec(spec)? {
        Spec::Http(url) => Ok(Box::new(HttpEmbedder(HttpService {
            url,
            client: http_client(svc)?,
        }))),
        Spec::Mock(None) | Spec::Thumbnail => Ok(Box::new(ThumbnailEmbedder)),
        Spec::Mock(Some(_)) => Err(format!("{spec:?}: the embedder stand-in takes no value")),
    }
}

/// Spaces calls at least `interval` apart across threads.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn per_minute(calls: u32) -> Self {
        let interval = if calls == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(60.0 / calls as f64)
        };
        RateLimiter {
            interval,
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

/// Chat-completions client that sends the screenshot and prompt in one turn.
pub struct HttpGenerator {
    url: String,
    model: String,
    api_key: Option<String>,
    client: Client,
    retry: RetryPolicy,
    limiter: RateLimiter,
}

impl HttpGenerator {
    pub fn new(
        url: &str,
        model: &str,
        api_key: Option<String>,
        svc: &ServicesConfig,
        per_minute: u32,
    ) -> Result<Self, String> {
        Ok(HttpGenerator {
            url: url.to_string(),
            model: model.to_string(),
            api_key,
            client: http_client(svc)?,
            retry: svc.retry,
            limiter: RateLimiter::per_minute(per_minute),
        })
    }

    fn once(&self, req: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        self.limiter.acquire();
        let image = base64::engine::general_purpose::STANDARD.encode(req.screenshot_png);
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": req.prompt},
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{image}")}},
                ],
            }],
        });
        let mut rb = self.client.post(&self.url).json(&body);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb.send().map_err(|e| GeneratorError::Unavailable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GeneratorError::Unavailable(e.to_string()))?;
        match status {
            s if s == StatusCode::UNAUTHORIZED || s == StatusCode::FORBIDDEN => {
                return Err(GeneratorError::Fatal(format!("{s}: authentication rejected")))
            }
            StatusCode::TOO_MANY_REQUESTS if text.contains("insufficient_quota") => {
                return Err(GeneratorError::Fatal("quota exhausted".into()))
            }
            s if s == StatusCode::TOO_MANY_REQUESTS || s.is_server_error() => {
                return Err(GeneratorError::Unavailable(format!(
                    "{s}: {}",
                    truncate(text.trim(), 200)
                )))
            }
            s if !s.is_success() => {
                return Err(GeneratorError::Refused(format!("{s}: {}", truncate(text.trim(), 200))))
            }
            _ => {}
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| GeneratorError::Refused(format!("unparsable reply: {e}")))?;
        let content = v["choices"][0]["message"]["content"].as_str().unwrap_or("").to_string();
        if content.trim().is_empty() {
            return Err(GeneratorError::Refused("empty completion".into()));
        }
        Ok(content)
    }
}

impl Generator for HttpGenerator {
    fn name(&self) -> &str {
        &self.model
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<String, GeneratorError> {
        let attempts = self.retry.attempts.max(1);
        let mut delay = Duration::from_millis(self.retry.base_delay_ms);
        let mut last = None;
        for attempt in 0..attempts {
            match self.once(req) {
                Err(GeneratorError::Unavailable(m)) => {
                    last = Some(GeneratorError::Unavailable(m));
                    if attempt + 1 < attempts {
                        thread::sleep(delay);
                        delay = (delay * 2).min(Duration::from_millis(self.retry.max_delay_ms));
                    }
                }
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// `echo`, `empty`, or `http:URL` / a bare http(s) URL.
pub fn generator(spec: &str, model: &str, svc: &ServicesConfig, per_minute: u32) -> Result<Box<dyn Generator>, String> {
    match spec.trim() {
        "echo" => Ok(Box::new(EchoGenerator)),
        "empty" => Ok(Box::new(EmptyGenerator)),
        s => {
            let url = s.strip_prefix("http:").filter(|u| u.starts_with("http")).unwrap_or(s);
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(format!(
                    "unrecognized generator {spec:?} (expected echo, empty or http:URL)"
                ));
            }
            let key = std::env::var("WEBCURATE_API_KEY").ok().filter(|k| !k.is_empty());
            Ok(Box::new(HttpGenerator::new(url, model, key, svc, per_minute)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs() {
        assert_eq!(parse_spec("mock:4.5"), Ok(Spec::Mock(Some(4.5))));
        assert_eq!(parse_spec(" http://x/y "), Ok(Spec::Http("http://x/y".into())));
        assert!(parse_spec("mock:abc").is_err());
        assert!(check_spec("thumbnail", false).is_err());
        assert!(check_spec("thumbnail", true).is_ok());
        assert!(embedder("mock:1", &ServicesConfig::default()).is_err());
    }

    #[test]
    fn mock_scores_are_stable_and_in_range() {
        let m = MockScorer(None);
        let a = m.score(b"abc").unwrap();
        assert_eq!(a, m.score(b"abc").unwrap());
        assert!((0.0..5.0).contains(&a));
        assert_eq!(MockScorer(Some(4.5)).score(b"x").unwrap(), 4.5);
        assert_eq!(MockNsfw(None).nsfw_score(b"x").unwrap(), 0.0);
    }

    #[test]
    fn unreachable_service_is_unavailable() {
        let svc = ServicesConfig {
            timeout_ms: 500,
            ..Default::default()
        };
        let s = scorer("http://127.0.0.1:1/score", &svc).unwrap();
        assert!(matches!(s.score(b"png"), Err(ServiceError::Unavailable(_))));
    }

    #[test]
    fn generator_specs() {
        let svc = ServicesConfig::default();
        assert_eq!(generator("echo", "m", &svc, 0).unwrap().name(), "echo");
        assert_eq!(
            generator("http:http://h/v1/chat/completions", "gpt", &svc, 60)
                .unwrap()
                .name(),
            "gpt"
        );
        assert!(generator("ftp:x", "m", &svc, 0).is_err());
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let l = RateLimiter::per_minute(6000);
        let t = Instant::now();
        for _ in 0..3 {
            l.acquire();
        }
        assert!(t.elapsed() >= Duration::from_millis(19));
    }
}
