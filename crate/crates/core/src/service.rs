//! Interfaces to the external models the pipeline consumes (quality scorer,
//! NSFW detector, image embedder) plus retry and a local embedding fallback.

use std::thread;
use std::time::Duration;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ServiceError {
    /// Transport failure; worth retrying.
    #[error("service unavailable: {0}")]
    Unavailable(String),
    /// The service answered, but not with something we accept.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("bad input image: {0}")]
    BadImage(String),
}

pub trait QualityScorer: Send + Sync {
    /// Quality score in `[0, 5]` for a screenshot.
    fn score(&self, png: &[u8]) -> Result<f64, ServiceError>;
}

pub trait NsfwDetector: Send + Sync {
    /// Probability-like NSFW score in `[0, 1]`.
    fn nsfw_score(&self, png: &[u8]) -> Result<f64, ServiceError>;
}

pub trait ImageEmbedder: Send + Sync {
    fn embed(&self, png: &[u8]) -> Result<Vec<f32>, ServiceError>;

    /// Embeds an already decoded image. The default re-encodes it as PNG.
    fn embed_image(&self, img: &image::RgbImage) -> Result<Vec<f32>, ServiceError> {
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| ServiceError::BadImage(e.to_string()))?;
        self.embed(&buf.into_inner())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            attempts: 1,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(16))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Runs `f` until it succeeds, fails with a non-transient error, or the
/// policy's attempts are used up. Backoff doubles after each failure.
pub fn with_retry<T>(policy: &RetryPolicy, mut f: impl FnMut() -> Result<T, ServiceError>) -> Result<T, ServiceError> {
    let attempts = policy.attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        match f() {
            Err(ServiceError::Unavailable(msg)) => {
                log::debug!("attempt {} failed: {msg}", attempt + 1);
                last = Some(ServiceError::Unavailable(msg));
                if attempt + 1 < attempts {
                    thread::sleep(policy.delay(attempt));
                }
            }
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Cosine similarity; zero vectors are similar only to each other.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// A deterministic, model-free stand-in for a learned image embedding:
/// a 32×32 area-averaged RGB thumbnail, mean-centred per channel, followed by
/// the mean colour. It ranks structural near-duplicates high and is stable
/// across runs, which is all the offline tests and dedup fallback need.
#[derive(Debug, Clone, Copy, Default)]
pub struct ThumbnailEmbedder;

const THUMB: u32 = 32;
const MEAN_WEIGHT: f32 = 8.0;

impl ThumbnailEmbedder {
    pub fn embed_rgb(&self, img: &image::RgbImage) -> Vec<f32> {
        let small = image::imageops::resize(img, THUMB, THUMB, FilterType::Triangle);
        let n = (THUMB * THUMB) as f32;
        let mut mean = [0f32; 3];
        for p in small.pixels() {
            for c in 0..3 {
                mean[c] += p[c] as f32 / 255.0;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut v = Vec::with_capacity((THUMB * THUMB * 3 + 3) as usize);
        for p in small.pixels() {
            for c in 0..3 {
                v.push(p[c] as f32 / 255.0 - mean[c]);
            }
        }
        v.extend(mean.iter().map(|m| (m - 0.5) * MEAN_WEIGHT));
        v
    }
}

impl ImageEmbedder for ThumbnailEmbedder {
    fn embed(&self, png: &[u8]) -> Result<Vec<f32>, ServiceError> {
        let img = image::load_from_memory(png).map_err(|e| ServiceError::BadImage(e.to_string()))?;
        Ok(self.embed_rgb(&img.to_rgb8()))
    }

    fn embed_image(&self, img: &image::RgbImage) -> Result<Vec<f32>, ServiceError> {
        Ok(self.embed_rgb(img))
    }
}
