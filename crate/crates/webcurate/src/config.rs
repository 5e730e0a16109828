//! Pipeline configuration. One TOML file, versioned, unknown keys rejected;
//! every default is the value the curation rules call for.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use webcurate_core::curate::{EMBEDDING_DUP_THRESHOLD, PER_SPLIT, TEST_MIN_SCORE};
use webcurate_core::purify::{CharRange, CleanseConfig, LengthGate};
use webcurate_core::safety::{MAX_BAD_WORDS, NSFW_THRESHOLD};
use webcurate_core::service::RetryPolicy;
use webcurate_render::RenderConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported config_version {0} (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub config_version: u32,
    /// Fan per-sample work out over the rayon pool.
    #[serde(default = "yes")]
    pub parallel: bool,
    #[serde(default)]
    pub length: LengthStage,
    #[serde(default)]
    pub cleanse: CleanseStage,
    #[serde(default)]
    pub render: RenderStage,
    #[serde(default)]
    pub score: ScoreStage,
    #[serde(default)]
    pub safety: SafetyStage,
    #[serde(default)]
    pub dedup: DedupStage,
    #[serde(default)]
    pub partition: PartitionStage,
    #[serde(default)]
    pub stats: StatsStage,
    #[serde(default)]
    pub services: ServicesConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            config_version: CONFIG_VERSION,
            parallel: true,
            length: LengthStage::default(),
            cleanse: CleanseStage::default(),
            render: RenderStage::default(),
            score: ScoreStage::default(),
            safety: SafetyStage::default(),
            dedup: DedupStage::default(),
            partition: PartitionStage::default(),
            stats: StatsStage::default(),
            services: ServicesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LengthStage {
    pub enabled: bool,
    pub html_range: CharRange,
    pub css_range: CharRange,
}

impl Default for LengthStage {
    fn default() -> Self {
        let g = LengthGate::default();
        LengthStage {
            enabled: true,
            html_range: g.html_range,
            css_range: g.css_range,
        }
    }
}

impl LengthStage {
    pub fn gate(&self) -> LengthGate {
        LengthGate {
            html_range: self.html_range,
            css_range: self.css_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleanseStage {
    pub enabled: bool,
    pub viewport_width: f64,
    pub viewport_height: f64,
}

impl Default for CleanseStage {
    fn default() -> Self {
        let c = CleanseConfig::default();
        CleanseStage {
            enabled: true,
            viewport_width: c.viewport_width,
            viewport_height: c.viewport_height,
        }
    }
}

impl CleanseStage {
    pub fn cleanse_config(&self) -> CleanseConfig {
        CleanseConfig {
            viewport_width: self.viewport_width,
            viewport_height: self.viewport_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderStage {
    pub enabled: bool,
    pub pool: usize,
    pub width: u32,
    pub height: u32,
    pub max_height: u32,
    pub timeout_ms: u64,
    pub settle_ms: u64,
    /// Browser binary; falls back to `$WEBCURATE_BROWSER` and `PATH`.
    pub browser: Option<PathBuf>,
}

impl Default for RenderStage {
    fn default() -> Self {
        let r = RenderConfig::default();
        RenderStage {
            enabled: true,
            pool: 2,
            width: r.width,
            height: r.height,
            max_height: r.max_height,
            timeout_ms: r.timeout_ms,
            settle_ms: r.settle_ms,
            browser: r.browser,
        }
    }
}

impl RenderStage {
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            width: self.width,
            height: self.height,
            max_height: self.max_height,
            timeout_ms: self.timeout_ms,
            settle_ms: self.settle_ms,
            browser: self.browser.clone(),
            extra_args: Vec::new(),
        }
    }
}

/// Service specs are `http://…`/`https://…` URLs or a built-in stand-in
/// (`mock`, `mock:<value>`, and for embeddings `thumbnail`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreStage {
    pub enabled: bool,
    pub scorer: String,
    /// Annotation store whose human consensus overrides the model.
    pub store: Option<PathBuf>,
}

impl Default for ScoreStage {
    fn default() -> Self {
        ScoreStage {
            enabled: true,
            scorer: "http://127.0.0.1:8501/score".into(),
            store: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyStage {
    pub enabled: bool,
    pub nsfw: String,
    pub nsfw_threshold: f64,
    pub max_bad_words: usize,
    pub badwords: Vec<PathBuf>,
}

impl Default for SafetyStage {
    fn default() -> Self {
        SafetyStage {
            enabled: true,
            nsfw: "http://127.0.0.1:8502/nsfw".into(),
            nsfw_threshold: NSFW_THRESHOLD,
            max_bad_words: MAX_BAD_WORDS,
            badwords: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DedupStage {
    pub enabled: bool,
    pub embedder: String,
    pub threshold: f64,
}

impl Default for DedupStage {
    fn default() -> Self {
        DedupStage {
            enabled: true,
            embedder: "thumbnail".into(),
            threshold: EMBEDDING_DUP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionStage {
    pub enabled: bool,
    pub per_split: usize,
    pub seed: u64,
    pub min_test_score: f64,
    /// Ids rejected on manual review, one per line; they may only land in train.
    pub reject_list: Option<PathBuf>,
}

impl Default for PartitionStage {
    fn default() -> Self {
        PartitionStage {
            enabled: true,
            per_split: PER_SPLIT,
            seed: 17,
            min_test_score: TEST_MIN_SCORE,
            reject_list: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsStage {
    pub enabled: bool,
}

impl Default for StatsStage {
    fn default() -> Self {
        StatsStage { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServicesConfig {
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for ServicesConfig {
    fn default() -> Self {
        ServicesConfig {
            timeout_ms: 30_000,
            retry: RetryPolicy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks everything that can be checked without touching inputs, so a
    /// bad setting aborts before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.config_version != CONFIG_VERSION {
            return Err(ConfigError::Version(self.config_version));
        }
        if self.render.enabled {
            if self.render.pool == 0 {
                return bad("render.pool must be at least 1".into());
            }
            self.render
                .render_config()
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let needs_shots = [
            ("score", self.score.enabled),
            ("safety", self.safety.enabled),
            ("dedup", self.dedup.enabled),
        ];
        for (stage, on) in needs_shots {
            if on && !self.render.enabled {
                return bad(format!("{stage} needs screenshots but render is disabled"));
            }
        }
        if self.score.enabled {
            crate::clients::check_spec(&self.score.scorer, false).map_err(ConfigError::Invalid)?;
        }
        if self.safety.enabled {
            crate::clients::check_spec(&self.safety.nsfw, false).map_err(ConfigError::Invalid)?;
            if self.safety.nsfw_threshold.is_nan() || self.safety.nsfw_threshold < 0.0 {
                return bad("safety.nsfw_threshold must be a non-negative number".into());
            }
        }
        if self.dedup.enabled {
            crate::clients::check_spec(&self.dedup.embedder, true).map_err(ConfigError::Invalid)?;
            if self.dedup.threshold.is_nan() {
                return bad("dedup.threshold must be a number".into());
            }
        }
        if self.partition.enabled && self.partition.per_split == 0 {
            return bad("partition.per_split must be at least 1".into());
        }
        Ok(())
    }
}
