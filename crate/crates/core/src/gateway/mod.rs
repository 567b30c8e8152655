//! Answer-producing backends behind one interface, with a persistent
//! response cache and bounded retries in front of them.

mod cache;
mod remote;
mod scripted;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, CacheMeta, ResponseCache};
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{scripted_answer, NoiseProfile, ScriptedBackend, DISTRACTORS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub prompt: String,
    pub temperature: f64,
    pub model: String,
    pub max_answer_len: u32,
}

impl PromptRequest {
    pub fn new(prompt: impl Into<String>, temperature: f64, model: impl Into<String>) -> Self {
        PromptRequest {
            prompt: prompt.into(),
            temperature,
            model: model.into(),
            max_answer_len: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub ordinal: usize,
    pub cached: bool,
    pub backend_id: String,
}

/// Something that turns a prompt into one sampled answer.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Produce the `ordinal`-th sample. Errors are transport-level messages
    /// and are retried by the gateway.
    fn generate(&self, req: &PromptRequest, ordinal: usize, run_seed: u64) -> std::result::Result<String, String>;

    fn is_remote(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    backend_calls: AtomicUsize,
    warnings: Mutex<Vec<String>>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cache: Option<ResponseCache>) -> Self {
        Gateway {
            backend,
            cache,
            retry: RetryPolicy::default(),
            backend_calls: AtomicUsize::new(0),
            warnings: Mutex::new(Vec::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn is_remote(&self) -> bool {
        self.backend.is_remote()
    }

    /// Completions actually requested from the backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.warnings.lock().expect("warnings lock").clone()
    }

    fn warn(&self, msg: String) {
        log::warn!("{msg}");
        let mut w = self.warnings.lock().expect("warnings lock");
        if !w.contains(&msg) {
            w.push(msg);
        }
    }

    fn fetch(&self, req: &PromptRequest, ordinal: usize, run_seed: u64) -> Result<String> {
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.generate(req, ordinal, run_seed) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::debug!("attempt {} for ordinal {ordinal} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(Error::Backend {
            ordinal,
            message: format!("{} attempts failed: {last}", self.retry.attempts.max(1)),
        })
    }

    /// Return exactly `n` completions with ordinals `0..n`, serving each
    /// from the cache when present and caching every fresh answer before
    /// moving on.
    pub fn complete(&self, req: &PromptRequest, n: usize, run_seed: u64) -> Result<Vec<Completion>> {
        if n == 0 {
            return Err(Error::Config("number of completions must be at least 1".into()));
        }
        req.validate()?;
        if req.temperature == 0.0 && n > 1 {
            self.warn(format!(
                "sampling {n} answers at temperature 0; answers will typically coincide"
            ));
        }
        let backend_id = self.backend.id().to_string();
        let mut out = Vec::with_capacity(n);
        for ordinal in 0..n {
            let key = cache_key(&backend_id, req, ordinal, run_seed);
            let hit = match &self.cache {
                Some(c) => c.lookup(&key)?,
                None => None,
            };
            let (text, cached) = match hit {
                Some(t) => (t, true),
                None => {
                    let t = self.fetch(req, ordinal, run_seed)?;
                    if let Some(c) = &self.cache {
                        c.store(&key, &t, Some(&ResponseCache::meta_now(req, ordinal)))?;
                    }
                    (t, false)
                }
            };
            out.push(Completion {
                text,
                ordinal,
                cached,
                backend_id: backend_id.clone(),
            });
        }
        Ok(out)
    }
}
