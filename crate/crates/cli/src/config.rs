//! Application configuration: TOML file, `ESMEM_*` environment variables and
//! command-line flags, applied in that order (later wins).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use esmem_core::memory::MemoryConfig;
use esmem_core::prompts::PromptIds;
use esmem_core::{ProviderConfig, RetrievalParams, SegmentationConfig, SessionFormat};
use serde::{Deserialize, Serialize};

/// Environment variable holding the provider API key.
pub const API_KEY_ENV: &str = "ESMEM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

impl FromStr for ProviderKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mock" => Ok(Self::Mock),
            "http" => Ok(Self::Http),
            other => bail!("unknown provider kind `{other}` (expected mock or http)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    /// JSON object mapping prompt keys to replies. Relative paths resolve
    /// against the config file's directory.
    pub script: Option<PathBuf>,
    pub seed: u64,
    pub dim: usize,
}

impl Default for MockSection {
    fn default() -> Self {
        Self {
            script: None,
            seed: 7,
            dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Name of the environment variable to read the API key from.
    pub api_key_env: String,
    pub mock: MockSection,
    pub chat: ProviderConfig,
    /// Falls back to `chat` when absent.
    pub embedding: Option<ProviderConfig>,
    /// Used by `eval-qa --judge`; falls back to `chat` when absent.
    pub judge: Option<ProviderConfig>,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            api_key_env: API_KEY_ENV.into(),
            mock: MockSection::default(),
            chat: ProviderConfig::default(),
            embedding: None,
            judge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub log_level: String,
    pub corpus_format: SessionFormat,
    pub provider: ProviderSection,
    pub segmentation: SegmentationConfig,
    pub memory: MemoryConfig,
    pub retrieval: RetrievalParams,
    pub prompts: PromptIds,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            log_level: "info".into(),
            corpus_format: SessionFormat::Jsonl,
            provider: ProviderSection::default(),
            segmentation: SegmentationConfig::default(),
            memory: MemoryConfig::default(),
            retrieval: RetrievalParams::default(),
            prompts: PromptIds::default(),
        }
    }
}

/// Per-knob overrides collected from flags or the environment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub quantile: Option<f64>,
    pub tau_c: Option<f64>,
    pub context_window: Option<usize>,
    pub boundary_context: Option<usize>,
    pub anchor_k: Option<usize>,
    pub window_w: Option<usize>,
    pub alpha: Option<f64>,
    pub final_k: Option<usize>,
    pub provider: Option<ProviderKind>,
    pub log_level: Option<String>,
}

fn parse_env<T: FromStr>(get: &dyn Fn(&str) -> Option<String>, name: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match get(name) {
        None => Ok(None),
        Some(raw) if raw.trim().is_empty() => Ok(None),
        Some(raw) => raw
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| anyhow::anyhow!("{name}={raw}: {e}")),
    }
}

impl Overrides {
    /// Reads `ESMEM_*` variables through `get` (normally `std::env::var`).
    pub fn from_env(get: &dyn Fn(&str) -> Option<String>) -> Result<Self> {
        Ok(Self {
            quantile: parse_env(get, "ESMEM_QUANTILE")?,
            tau_c: parse_env(get, "ESMEM_TAU_C")?,
            context_window: parse_env(get, "ESMEM_CONTEXT_WINDOW")?,
            boundary_context: parse_env(get, "ESMEM_BOUNDARY_CONTEXT")?,
            anchor_k: parse_env(get, "ESMEM_ANCHOR_K")?,
            window_w: parse_env(get, "ESMEM_WINDOW_W")?,
            alpha: parse_env(get, "ESMEM_ALPHA")?,
            final_k: parse_env(get, "ESMEM_FINAL_K")?,
            provider: parse_env(get, "ESMEM_PROVIDER")?,
            log_level: get("ESMEM_LOG_LEVEL").filter(|s| !s.trim().is_empty()),
        })
    }

    pub fn apply(&self, cfg: &mut AppConfig) {
        let seg = &mut cfg.segmentation;
        let ret = &mut cfg.retrieval;
        set(&mut seg.quantile, self.quantile);
        set(&mut seg.tau_c, self.tau_c);
        set(&mut seg.context_window, self.context_window);
        set(&mut cfg.memory.boundary_context, self.boundary_context);
        set(&mut ret.anchor_k, self.anchor_k);
        set(&mut ret.window_w, self.window_w);
        set(&mut ret.alpha, self.alpha);
        set(&mut ret.final_k, self.final_k);
        set(&mut cfg.provider.kind, self.provider);
        set(&mut cfg.log_level, self.log_level.clone());
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl AppConfig {
    /// Parses a TOML config; relative mock-script paths are anchored at `base`.
    pub fn from_toml(raw: &str, base: &Path) -> Result<Self> {
        let mut cfg: AppConfig = toml::from_str(raw)?;
        if let Some(script) = &cfg.provider.mock.script {
            if script.is_relative() {
                cfg.provider.mock.script = Some(base.join(script));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&raw, base).with_context(|| format!("invalid config file {}", path.display()))
    }

    /// File (or defaults), then environment, then flags.
    pub fn resolve(
        file: Option<&Path>,
        env: &dyn Fn(&str) -> Option<String>,
        flags: &Overrides,
    ) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        Overrides::from_env(env)?.apply(&mut cfg);
        flags.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.segmentation.validate()?;
        self.retrieval.validate()?;
        if self.memory.boundary_context == 0 {
            bail!("memory.boundary_context must be >= 1");
        }
        if self.provider.kind == ProviderKind::Mock && self.provider.mock.dim < 2 {
            bail!("provider.mock.dim must be >= 2");
        }
        if !self.provider.chat.api_key.is_empty() {
            log::warn!("api_key set in the config file; prefer the {} environment variable", self.provider.api_key_env);
        }
        esmem_core::prompts::PromptSet::from_ids(&self.prompts)?;
        Ok(())
    }

    /// The parts of the configuration that determine pipeline outputs.
    /// Paths and secrets are left out so snapshots are portable.
    pub fn snapshot(&self) -> serde_json::Value {
        let provider = match self.provider.kind {
            ProviderKind::Mock => serde_json::json!({
                "kind": "mock",
                "seed": self.provider.mock.seed,
                "dim": self.provider.mock.dim,
            }),
            ProviderKind::Http => serde_json::json!({
                "kind": "http",
                "chat_model": self.provider.chat.model_name,
                "embedding_model": self.provider.embedding.as_ref().unwrap_or(&self.provider.chat).model_name,
            }),
        };
        serde_json::json!({
            "provider": provider,
            "segmentation": self.segmentation,
            "memory": self.memory,
            "retrieval": self.retrieval,
            "prompts": self.prompts,
        })
    }
}
