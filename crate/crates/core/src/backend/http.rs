//! JSON-over-HTTP backends.
//!
//! Wire contract (all bodies UTF-8 JSON, optional `Authorization: Bearer`):
//!
//! | role   | request                                   | response              |
//! |--------|-------------------------------------------|-----------------------|
//! | vision | `POST /describe {image, prompt}`          | `{text}`              |
//! | text   | `POST /generate {prompt, temperature, max_tokens}` | `{text}`     |
//! | embed  | `POST /embed {text}`                      | `{embedding: [f32]}`  |
//!
//! `image` is standard-alphabet base64 without line wrapping.

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{BackendError, EmbedBackend, RetryPolicy, TextBackend, VisionBackend};

pub const VISION_ENDPOINT: &str = "VISION_ENDPOINT";
pub const VISION_API_KEY: &str = "VISION_API_KEY";
pub const GEN_ENDPOINT: &str = "GEN_ENDPOINT";
pub const GEN_API_KEY: &str = "GEN_API_KEY";
pub const EMBED_ENDPOINT: &str = "EMBED_ENDPOINT";

/// Connection settings shared by all HTTP backends.
#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model_id: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        HttpSettings {
            endpoint: endpoint.into(),
            api_key: None,
            model_id: model_id.into(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Read endpoint (required) and bearer key (optional) from the environment.
    pub fn from_env(endpoint_var: &str, key_var: Option<&str>, model_id: &str) -> Option<Self> {
        let endpoint = std::env::var(endpoint_var).ok()?;
        let mut s = HttpSettings::new(endpoint, model_id);
        s.api_key = key_var.and_then(|k| std::env::var(k).ok()).filter(|k| !k.is_empty());
        Some(s)
    }
}

struct JsonClient {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

impl JsonClient {
    fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(JsonClient { settings, client })
    }

    fn url(&self, route: &str) -> String {
        format!("{}/{route}", self.settings.endpoint.trim_end_matches('/'))
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        route: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let mut req = self.client.post(self.url(route)).json(body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            let mut body = text;
            body.truncate(512);
            return Err(BackendError::Status {
                status: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("bad {route} response: {e}")))
    }
}

#[derive(Serialize)]
struct DescribeRequest<'a> {
    image: String,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TextResponse {
    text: String,
}

pub struct HttpVisionBackend {
    inner: JsonClient,
    /// Wraps the task prompt in the model's chat format; must contain `{PROMPT}`.
    prompt_template: String,
}

impl HttpVisionBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        Ok(HttpVisionBackend {
            inner: JsonClient::new(settings)?,
            prompt_template: "{PROMPT}".into(),
        })
    }

    pub fn with_prompt_template(mut self, template: impl Into<String>) -> Self {
        self.prompt_template = template.into();
        self
    }

    pub fn apply_template(&self, prompt: &str) -> String {
        self.prompt_template.replace("{PROMPT}", prompt)
    }
}

impl VisionBackend for HttpVisionBackend {
    fn id(&self) -> &str {
        &self.inner.settings.model_id
    }

    fn describe(&self, image: &[u8], prompt: &str) -> Result<String, BackendError> {
        let prompt = self.apply_template(prompt);
        let body = DescribeRequest {
            image: base64::engine::general_purpose::STANDARD.encode(image),
            prompt: &prompt,
        };
        let resp: TextResponse = self.inner.post("describe", &body)?;
        Ok(resp.text)
    }

    fn retry_policy(&self) -> RetryPolicy {
        self.inner.settings.retry
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
}

pub struct HttpTextBackend {
    inner: JsonClient,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl HttpTextBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        Ok(HttpTextBackend {
            inner: JsonClient::new(settings)?,
            temperature: 0.2,
            max_tokens: 2048,
        })
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }
}

impl TextBackend for HttpTextBackend {
    fn id(&self) -> &str {
        &self.inner.settings.model_id
    }

    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        let body = GenerateRequest {
            prompt,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let resp: TextResponse = self.inner.post("generate", &body)?;
        Ok(resp.text)
    }

    fn retry_policy(&self) -> RetryPolicy {
        self.inner.settings.retry
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
}

pub struct HttpEmbedBackend {
    inner: JsonClient,
}

impl HttpEmbedBackend {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        Ok(HttpEmbedBackend {
            inner: JsonClient::new(settings)?,
        })
    }
}

impl EmbedBackend for HttpEmbedBackend {
    fn id(&self) -> &str {
        &self.inner.settings.model_id
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let resp: EmbedResponse = self.inner.post("embed", &EmbedRequest { text })?;
        if resp.embedding.is_empty() {
            return Err(BackendError::Protocol("empty embedding".into()));
        }
        Ok(resp.embedding)
    }

    fn retry_policy(&self) -> RetryPolicy {
        self.inner.settings.retry
    }
}
