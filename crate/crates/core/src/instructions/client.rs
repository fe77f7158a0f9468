//! Text-generation clients.
//!
//! [`HttpChatGenerator`] talks to a chat-completions style endpoint;
//! [`FixtureGenerator`] replays stored responses; [`CachedGenerator`] wraps
//! either with retry/backoff and a per-image response cache so reruns make no
//! new calls.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::GenerationPrompt;
use crate::error::{Error, Result};

pub const ENDPOINT_ENV: &str = "FEALLM_ENDPOINT";
pub const API_KEY_ENV: &str = "FEALLM_API_KEY";
pub const MODEL_ENV: &str = "FEALLM_MODEL";

pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &GenerationPrompt) -> Result<String>;
}

/// Replays `<dir>/<image_id>.txt`.
#[derive(Debug, Clone)]
pub struct FixtureGenerator {
    dir: PathBuf,
}

impl FixtureGenerator {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl TextGenerator for FixtureGenerator {
    fn generate(&self, prompt: &GenerationPrompt) -> Result<String> {
        let path = self.dir.join(format!("{}.txt", prompt.image_id));
        std::fs::read_to_string(&path)
            .map_err(|e| Error::Client(format!("no fixture for {} ({}): {e}", prompt.image_id, path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct HttpChatGenerator {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl HttpChatGenerator {
    /// Endpoint from `FEALLM_ENDPOINT`, optional bearer token from
    /// `FEALLM_API_KEY`, model name from `FEALLM_MODEL` (default `gpt-4o`).
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| Error::Invalid(format!("{ENDPOINT_ENV} is not set")))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(API_KEY_ENV).ok(),
            model: std::env::var(MODEL_ENV).unwrap_or_else(|_| "gpt-4o".to_string()),
            timeout: Duration::from_secs(60),
        })
    }

    pub fn request_body(&self, prompt: &GenerationPrompt) -> serde_json::Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                { "role": "system", "content": prompt.system },
                { "role": "user", "content": prompt.prompt },
            ],
        })
    }
}

impl TextGenerator for HttpChatGenerator {
    fn generate(&self, prompt: &GenerationPrompt) -> Result<String> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp: serde_json::Value = req
            .send_json(self.request_body(prompt))
            .map_err(|e| Error::Client(format!("{}: {e}", prompt.image_id)))?
            .into_json()
            .map_err(|e| Error::Client(format!("{}: unreadable response: {e}", prompt.image_id)))?;
        resp.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Client(format!("{}: response has no message content", prompt.image_id)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// What the cache stores per image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub image_id: String,
    pub system: String,
    pub prompt: String,
    pub response: String,
}

pub struct CachedGenerator<G> {
    inner: G,
    dir: PathBuf,
    retry: RetryPolicy,
    calls: AtomicUsize,
}

impl<G: TextGenerator> CachedGenerator<G> {
    pub fn new(inner: G, dir: impl Into<PathBuf>, retry: RetryPolicy) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            inner,
            dir,
            retry,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of calls made to the wrapped generator.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn entry_path(&self, image_id: &str) -> PathBuf {
        self.dir.join(format!("{image_id}.json"))
    }

    fn read_entry(path: &Path) -> Option<CacheEntry> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn write_entry(&self, entry: &CacheEntry) -> Result<()> {
        let path = self.entry_path(&entry.image_id);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(entry)?;
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

impl<G: TextGenerator> TextGenerator for CachedGenerator<G> {
    fn generate(&self, prompt: &GenerationPrompt) -> Result<String> {
        if let Some(entry) = Self::read_entry(&self.entry_path(&prompt.image_id)) {
            return Ok(entry.response);
        }
        let mut last_err = None;
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.inner.generate(prompt) {
                Ok(response) => {
                    self.write_entry(&CacheEntry {
                        image_id: prompt.image_id.clone(),
                        system: prompt.system.clone(),
                        prompt: prompt.prompt.clone(),
                        response: response.clone(),
                    })?;
                    return Ok(response);
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Client(format!(
            "{} failed after {} attempts: {}",
            prompt.image_id,
            self.retry.attempts.max(1),
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )))
    }
}

impl<G: TextGenerator + ?Sized> TextGenerator for Box<G> {
    fn generate(&self, prompt: &GenerationPrompt) -> Result<String> {
        (**self).generate(prompt)
    }
}
