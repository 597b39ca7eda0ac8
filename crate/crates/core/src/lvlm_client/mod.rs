//! Client contract for large visual-language models.
//!
//! [`LvlmClient`] wraps a transport ([`LvlmBackend`]) with a response cache,
//! retry with exponential backoff, attempt accounting and a bounded number of
//! in-flight requests.

mod cache;
mod mock;
mod remote;
mod verdict;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::MultimodalPrompt;

pub use cache::{cache_key, clear_cache_dir, list_cache_dir, CacheEntryInfo, ResponseCache};
pub use mock::{make_mock_client, MockBackend, MockPolicy, MOCK_ABSTAIN_RESPONSE};
pub use remote::{RemoteBackend, DEFAULT_API_KEY_ENV, DEFAULT_ENDPOINT};
pub use verdict::{parse_verdict, ParsedVerdict, Verdict};

/// Failure reported by a transport for one attempt.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying (timeouts, rate limits, 5xx).
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    /// Not worth retrying (malformed request, unexpected payload).
    #[error("fatal: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("backend unavailable after {attempts} attempts: {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("backend rejected the request: {0}")]
    BackendFailure(String),
    #[error("invalid client config: {0}")]
    InvalidConfig(String),
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// One model transport. Implementations must be callable concurrently.
pub trait LvlmBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, prompt: &MultimodalPrompt, temperature: f64, timeout: Duration) -> std::result::Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_retries: 3,
            timeout_secs: 60.0,
            max_in_flight: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ClientError::InvalidConfig(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_in_flight == 0 || !(self.timeout_secs > 0.0) {
            return Err(ClientError::InvalidConfig("max_in_flight and timeout_secs must be positive".into()));
        }
        Ok(())
    }

    /// Sleep before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_max_ms))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    /// Queries answered from the cache.
    pub cache_hits: u64,
    /// Queries that reached the backend (at least one attempt).
    pub network_queries: u64,
    /// Individual backend attempts, including retries.
    pub attempts: u64,
    pub failures: u64,
}

#[derive(Default)]
struct AtomicStats {
    cache_hits: AtomicU64,
    network_queries: AtomicU64,
    attempts: AtomicU64,
    failures: AtomicU64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub response: String,
    pub cached: bool,
    pub attempts: u32,
}

pub struct LvlmClient {
    backend: Arc<dyn LvlmBackend>,
    config: ClientConfig,
    cache: ResponseCache,
    stats: AtomicStats,
}

impl LvlmClient {
    pub fn new(backend: Arc<dyn LvlmBackend>, config: ClientConfig, cache: ResponseCache) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            backend,
            config,
            cache,
            stats: AtomicStats::default(),
        })
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            cache_hits: self.stats.cache_hits.load(Ordering::Relaxed),
            network_queries: self.stats.network_queries.load(Ordering::Relaxed),
            attempts: self.stats.attempts.load(Ordering::Relaxed),
            failures: self.stats.failures.load(Ordering::Relaxed),
        }
    }

    pub fn query(&self, prompt: &MultimodalPrompt) -> Result<String> {
        self.query_detailed(prompt).map(|o| o.response)
    }

    /// Sends `prompt` at the client's temperature. The prompt's own
    /// temperature field is not consulted.
    pub fn query_detailed(&self, prompt: &MultimodalPrompt) -> Result<QueryOutcome> {
        if prompt.is_empty() {
            return Err(ClientError::EmptyPrompt);
        }
        let temperature = self.config.temperature;
        let key = cache_key(self.model_id(), prompt, temperature);
        if let Some(response) = self.cache.get(&key)? {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(QueryOutcome {
                response,
                cached: true,
                attempts: 0,
            });
        }
        self.stats.network_queries.fetch_add(1, Ordering::Relaxed);
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            self.stats.attempts.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(prompt, temperature, timeout) {
                Ok(response) => {
                    let stored = self.cache.put(&key, self.model_id(), response)?;
                    return Ok(QueryOutcome {
                        response: stored,
                        cached: false,
                        attempts,
                    });
                }
                Err(TransportError::Transient(msg)) if attempts <= self.config.max_retries => {
                    let wait = self.config.backoff(attempts);
                    debug!("attempt {attempts} failed ({msg}); retrying in {wait:?}");
                    thread::sleep(wait);
                }
                Err(err) => {
                    self.stats.failures.fetch_add(1, Ordering::Relaxed);
                    warn!("query failed after {attempts} attempts: {err}");
                    return Err(match err {
                        TransportError::Transient(last) => ClientError::BackendUnavailable { attempts, last },
                        TransportError::Auth(m) => ClientError::AuthError(m),
                        TransportError::Fatal(m) => ClientError::BackendFailure(m),
                    });
                }
            }
        }
    }

    /// Queries every prompt with at most `max_in_flight` concurrent requests.
    /// Results keep the input order.
    pub fn query_many(&self, prompts: &[MultimodalPrompt]) -> Vec<Result<QueryOutcome>> {
        let workers = self.config.max_in_flight.min(prompts.len()).max(1);
        if workers == 1 {
            return prompts.iter().map(|p| self.query_detailed(p)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<QueryOutcome>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let outcome = self.query_detailed(&prompts[i]);
                    *slots[i].lock().expect("slot lock") = Some(outcome);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}
