//! Run configuration: one JSON document describes backends, engine, climate,
//! labeler and concurrency for a reproducible run.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::http::{self, HttpSettings};
use crate::backend::{
    EmbedBackend, HashEmbedder, HttpEmbedBackend, HttpTextBackend, HttpVisionBackend, MockTextBackend,
    MockVisionBackend, RetryPolicy, TextBackend, Throttle, Throttled, VisionBackend,
};
use crate::error::{Error, Result};
use crate::genjson::DEFAULT_MAX_RETRIES;
use crate::label::LabelerConfig;
use crate::simulate::{Climate, IdfTemplate};
use crate::vision::VisionPrompts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Literal base URL; takes precedence over `endpoint_env`.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub endpoint_env: Option<String>,
    /// Name of the environment variable holding the bearer key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Vision only: wraps the prompt, must contain `{PROMPT}`.
    #[serde(default)]
    pub prompt_template: Option<String>,
    /// Text only.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        /// Text role only: answer every rating with this value instead of
        /// the keyword heuristic.
        #[serde(default)]
        score: Option<f64>,
    },
    Http(HttpBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock { score: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub vision: BackendConfig,
    pub text: BackendConfig,
    pub embed: BackendConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EngineConfig {
    #[default]
    Surrogate,
    External {
        weather: PathBuf,
        engine_home: PathBuf,
        #[serde(default)]
        template: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    /// Total attempts per backend call, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    /// Total generation attempts per home before giving up.
    pub generation_attempts: u32,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
            generation_attempts: DEFAULT_MAX_RETRIES,
        }
    }
}

impl RetryConfig {
    pub fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts,
            base_delay: Duration::from_millis(self.base_delay_ms),
            max_delay: Duration::from_millis(self.max_delay_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backends: BackendsConfig,
    pub engine: EngineConfig,
    pub climate: Climate,
    pub labeler: LabelerConfig,
    pub prompts: VisionPrompts,
    pub retries: RetryConfig,
    /// Homes processed concurrently, and the cap on in-flight backend calls.
    pub parallelism: usize,
    /// Backend calls per second across all roles; unlimited when absent.
    pub rate_limit_per_sec: Option<f64>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            backends: BackendsConfig::default(),
            engine: EngineConfig::default(),
            climate: Climate::default(),
            labeler: LabelerConfig::default(),
            prompts: VisionPrompts::default(),
            retries: RetryConfig::default(),
            parallelism: 4,
            rate_limit_per_sec: None,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn check(&self) -> Result<()> {
        self.labeler.check()?;
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        if self.retries.max_attempts == 0 || self.retries.generation_attempts == 0 {
            return Err(Error::Config("retry attempt counts must be >= 1".into()));
        }
        if let Some(r) = self.rate_limit_per_sec {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config("rate_limit_per_sec must be > 0".into()));
            }
        }
        let c = &self.climate;
        if !(c.hdd >= 0.0 && c.cdd >= 0.0 && c.story_height_m > 0.0) {
            return Err(Error::Config(
                "climate degree-days must be >= 0 and story height > 0".into(),
            ));
        }
        if let BackendConfig::Mock { score: Some(s) } = self.backends.text {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config("mock text score must lie in [0, 1]".into()));
            }
        }
        if let BackendConfig::Http(h) = &self.backends.vision {
            if let Some(t) = &h.prompt_template {
                if !t.contains("{PROMPT}") {
                    return Err(Error::Config("vision prompt_template lacks {PROMPT}".into()));
                }
            }
        }
        for prompt in [&self.prompts.facade, &self.prompts.floorplan] {
            if prompt.trim().is_empty() {
                return Err(Error::Config("vision prompts must be nonempty".into()));
            }
        }
        Ok(())
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Config::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn template(&self) -> Result<IdfTemplate> {
        match &self.engine {
            EngineConfig::External { template: Some(p), .. } => IdfTemplate::load(p),
            _ => Ok(IdfTemplate::default()),
        }
    }

    /// Instantiate the configured backends, sharing one throttle.
    pub fn backends(&self) -> Result<Backends> {
        let throttle = Arc::new(Throttle::new(self.parallelism, self.rate_limit_per_sec));
        let retry = self.retries.policy();
        let counts = CallCounts::default();
        let settings = |h: &HttpBackendConfig, default_env: &str, default_key: &str| -> Result<HttpSettings> {
            let endpoint = match (&h.endpoint, &h.endpoint_env) {
                (Some(e), _) => e.clone(),
                (None, var) => {
                    let var = var.as_deref().unwrap_or(default_env);
                    std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?
                }
            };
            let mut s = HttpSettings::new(endpoint, h.model.clone());
            let key_var = h.api_key_env.as_deref().unwrap_or(default_key);
            s.api_key = std::env::var(key_var).ok().filter(|k| !k.is_empty());
            s.timeout = Duration::from_secs(h.timeout_secs);
            s.retry = retry;
            Ok(s)
        };
        let backend_err = |e: crate::backend::BackendError| Error::Config(e.to_string());

        let vision: Box<dyn VisionBackend> = match &self.backends.vision {
            BackendConfig::Mock { .. } => {
                Box::new(Throttled::new(MockVisionBackend, throttle.clone()).counted(counts.vision.clone()))
            }
            BackendConfig::Http(h) => {
                let mut b = HttpVisionBackend::new(settings(h, http::VISION_ENDPOINT, http::VISION_API_KEY)?)
                    .map_err(backend_err)?;
                if let Some(t) = &h.prompt_template {
                    b = b.with_prompt_template(t.clone());
                }
                Box::new(Throttled::new(b, throttle.clone()).counted(counts.vision.clone()))
            }
        };
        let text: Box<dyn TextBackend> = match &self.backends.text {
            BackendConfig::Mock { score } => {
                let mock = score.map(MockTextBackend::constant).unwrap_or_default();
                Box::new(Throttled::new(mock, throttle.clone()).counted(counts.text.clone()))
            }
            BackendConfig::Http(h) => {
                let mut b =
                    HttpTextBackend::new(settings(h, http::GEN_ENDPOINT, http::GEN_API_KEY)?).map_err(backend_err)?;
                if h.temperature.is_some() || h.max_tokens.is_some() {
                    b = b.with_sampling(h.temperature.unwrap_or(0.2), h.max_tokens.unwrap_or(2048));
                }
                Box::new(Throttled::new(b, throttle.clone()).counted(counts.text.clone()))
            }
        };
        let embed: Box<dyn EmbedBackend> = match &self.backends.embed {
            BackendConfig::Mock { .. } => {
                Box::new(Throttled::new(HashEmbedder::default(), throttle.clone()).counted(counts.embed.clone()))
            }
            BackendConfig::Http(h) => {
                let b =
                    HttpEmbedBackend::new(settings(h, http::EMBED_ENDPOINT, "EMBED_API_KEY")?).map_err(backend_err)?;
                Box::new(Throttled::new(b, throttle.clone()).counted(counts.embed.clone()))
            }
        };
        Ok(Backends {
            vision,
            text,
            embed,
            throttle,
            counts,
        })
    }
}

pub struct Backends {
    pub vision: Box<dyn VisionBackend>,
    pub text: Box<dyn TextBackend>,
    pub embed: Box<dyn EmbedBackend>,
    pub throttle: Arc<Throttle>,
    pub counts: CallCounts,
}

/// Backend calls made so far, per role.
#[derive(Debug, Clone, Default)]
pub struct CallCounts {
    pub vision: Arc<AtomicU64>,
    pub text: Arc<AtomicU64>,
    pub embed: Arc<AtomicU64>,
}

impl CallCounts {
    pub fn snapshot(&self) -> [(&'static str, u64); 3] {
        [
            ("vision", self.vision.load(Ordering::Relaxed)),
            ("text", self.text.load(Ordering::Relaxed)),
            ("embed", self.embed.load(Ordering::Relaxed)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = Config::from_json("{}").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.labeler.eta_weight, 0.80);
        assert_eq!(cfg.parallelism, 4);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(matches!(
            Config::from_json(r#"{"paralellism": 2}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_weights_rejected() {
        let err = Config::from_json(r#"{"labeler": {"eta_weight": 0.9, "lambda_weight": 0.2}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.climate.hdd += 1.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn full_document_parses() {
        let cfg = Config::from_json(
            r#"{
              "backends": {
                "vision": {"kind": "http", "endpoint": "http://127.0.0.1:9", "model": "vlm", "prompt_template": "<image>\n{PROMPT}"},
                "text": {"kind": "mock", "score": 0.3},
                "embed": {"kind": "mock"}
              },
              "engine": {"kind": "external", "weather": "w.epw", "engine_home": "/opt/eplus"},
              "climate": {"hdd": 2500, "cdd": 700},
              "labeler": {"normalized_mu": true},
              "retries": {"max_attempts": 5},
              "parallelism": 2,
              "rate_limit_per_sec": 1.5
            }"#,
        )
        .unwrap();
        assert!(matches!(cfg.engine, EngineConfig::External { .. }));
        assert_eq!(cfg.climate.story_height_m, 3.0);
        assert_eq!(cfg.retries.generation_attempts, 3);
        let b = cfg.backends().unwrap();
        assert_eq!(b.text.generate("rate this: \"\"\"x\"\"\"").unwrap(), "0.3000");
    }

    #[test]
    fn missing_endpoint_env_is_config_error() {
        let cfg = Config::from_json(
            r#"{"backends": {"text": {"kind": "http", "endpoint_env": "SYNTHOMES_TEST_UNSET_VAR", "model": "m"}}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.backends(), Err(Error::Config(_))));
    }
}
