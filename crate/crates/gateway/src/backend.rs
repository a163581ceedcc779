use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;

use crate::error::GatewayError;
use crate::types::{GenerationRequest, GenerationResult, TokenLogProbs};

/// Something that can generate text and, optionally, score tokens.
///
/// Implementations perform a single attempt; retries, caching and the
/// in-flight bound live in [`crate::Gateway`].
#[async_trait]
pub trait Backend: Send + Sync {
    /// Short label recorded in run manifests.
    fn name(&self) -> &str;

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError>;

    async fn score_tokens(&self, model_id: &str, text: &str) -> Result<TokenLogProbs, GatewayError> {
        let _ = (model_id, text);
        Err(GatewayError::Unsupported("token scoring".into()))
    }
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        (**self).generate(req).await
    }

    async fn score_tokens(&self, model_id: &str, text: &str) -> Result<TokenLogProbs, GatewayError> {
        (**self).score_tokens(model_id, text).await
    }
}

/// Counts calls currently inside a backend and the high-water mark.
#[derive(Debug, Default)]
pub struct ConcurrencyProbe {
    current: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

impl ConcurrencyProbe {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Marks a call as in flight until the guard drops.
    pub fn enter(self: &Arc<Self>) -> ProbeGuard {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.total.fetch_add(1, Ordering::SeqCst);
        ProbeGuard(Arc::clone(self))
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn total(&self) -> usize {
        self.total.load(Ordering::SeqCst)
    }
}

pub struct ProbeGuard(Arc<ConcurrencyProbe>);

impl Drop for ProbeGuard {
    fn drop(&mut self) {
        self.0.current.fetch_sub(1, Ordering::SeqCst);
    }
}
