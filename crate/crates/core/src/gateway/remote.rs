//! OpenAI-compatible HTTP backend (chat completions and embeddings).

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, PromptRequest};

pub const ENV_ENDPOINT: &str = "SELFNER_ENDPOINT";
pub const ENV_API_KEY: &str = "SELFNER_API_KEY";
pub const ENV_MODEL: &str = "SELFNER_MODEL";
pub const ENV_EMBED_MODEL: &str = "SELFNER_EMBED_MODEL";

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub embed_model: String,
    pub timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "https://api.openai.com/v1".into(),
            api_key: None,
            model: "gpt-3.5-turbo".into(),
            embed_model: "text-embedding-ada-002".into(),
            timeout: Duration::from_secs(120),
        }
    }
}

impl RemoteConfig {
    /// Defaults overlaid with the `SELFNER_*` environment variables.
    pub fn from_env() -> Self {
        let mut c = RemoteConfig::default();
        if let Ok(v) = std::env::var(ENV_ENDPOINT) {
            c.endpoint = v;
        }
        if let Ok(v) = std::env::var(ENV_API_KEY) {
            c.api_key = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_MODEL) {
            c.model = v;
        }
        if let Ok(v) = std::env::var(ENV_EMBED_MODEL) {
            c.embed_model = v;
        }
        c
    }
}

pub struct RemoteBackend {
    id: String,
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteBackend {
            id: format!("openai-compatible:{}", config.endpoint.trim_end_matches('/')),
            config,
            agent,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, String> {
        let url = format!("{}/{path}", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| format!("POST {url}: {e}"))?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| format!("POST {url}: bad response body: {e}"))
    }

    /// One embeddings call for a batch of texts; vectors come back in input
    /// order (the response `index` field is honoured when present).
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        let body = json!({ "model": self.config.embed_model, "input": texts });
        let v = self.post("embeddings", &body)?;
        let data = v["data"].as_array().ok_or("embeddings response has no data array")?;
        if data.len() != texts.len() {
            return Err(format!(
                "embeddings response has {} vectors for {} inputs",
                data.len(),
                texts.len()
            ));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let idx = item["index"].as_u64().map(|i| i as usize).unwrap_or(pos);
            let vec = item["embedding"]
                .as_array()
                .ok_or("embedding item has no vector")?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32).ok_or("non-numeric embedding value"))
                .collect::<Result<Vec<f32>, _>>()?;
            *out.get_mut(idx).ok_or("embedding index out of range")? = vec;
        }
        Ok(out)
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &PromptRequest, _ordinal: usize, _run_seed: u64) -> Result<String, String> {
        let model = if req.model.is_empty() { &self.config.model } else { &req.model };
        let body = json!({
            "model": model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "temperature": req.temperature,
            "max_tokens": req.max_answer_len,
            "n": 1,
        });
        let v = self.post("chat/completions", &body)?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("chat response without message content: {v}"))
    }

    fn is_remote(&self) -> bool {
        true
    }
}
