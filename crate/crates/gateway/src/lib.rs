//! Uniform access to text generation and token scoring on an inference
//! endpoint.
//!
//! [`Gateway`] wraps any [`Backend`] with a content-addressed response cache,
//! retries with exponential backoff, and a hard bound on requests in flight.

pub mod backend;
pub mod cache;
pub mod error;
pub mod http;
pub mod retry;
pub mod scripted;
pub mod types;

use std::sync::Arc;

use tokio::sync::Semaphore;

pub use backend::{Backend, ConcurrencyProbe};
pub use cache::ResponseCache;
pub use error::GatewayError;
pub use http::HttpBackend;
pub use retry::RetryPolicy;
pub use scripted::{prompt_digest, ScriptedBackend};
pub use types::{BackendConfig, DecodeMode, FinishReason, GenerationRequest, GenerationResult, TokenLogProbs};

/// Shared handle; clones refer to the same limiter and cache.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    limiter: Arc<Semaphore>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let cache = cfg.cache_dir.as_ref().map(ResponseCache::new).transpose()?;
        Ok(Self {
            backend,
            cache,
            limiter: Arc::new(Semaphore::new(cfg.max_in_flight)),
            retry: RetryPolicy::new(cfg.retry_limit, cfg.backoff_base),
        })
    }

    /// Gateway over the HTTP backend described by `cfg`.
    pub fn http(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        let backend = HttpBackend::new(cfg)?;
        Self::new(Arc::new(backend), cfg)
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        req.validate()?;
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get_generation(req).await {
                return Ok(hit);
            }
        }
        let mut result = self
            .retry
            .run(|_| async {
                let _permit = self.limiter.acquire().await.expect("limiter never closes");
                self.backend.generate(req).await
            })
            .await?;
        if result.finish_reason == FinishReason::Length {
            result.token_count = req.max_tokens;
        }
        result.cached = false;
        if let Some(cache) = &self.cache {
            if result.finish_reason != FinishReason::Error {
                if let Err(e) = cache.put_generation(req, &result).await {
                    tracing::warn!(error = %e, "failed to persist generation");
                }
            }
        }
        Ok(result)
    }

    pub async fn score_tokens(&self, model_id: &str, text: &str) -> Result<TokenLogProbs, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("cannot score empty text".into()));
        }
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get_scores(model_id, text).await {
                return Ok(hit);
            }
        }
        let scores = self
            .retry
            .run(|_| async {
                let _permit = self.limiter.acquire().await.expect("limiter never closes");
                self.backend.score_tokens(model_id, text).await
            })
            .await?;
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put_scores(model_id, text, &scores).await {
                tracing::warn!(error = %e, "failed to persist token scores");
            }
        }
        Ok(scores)
    }
}
