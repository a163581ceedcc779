//! Deterministic table-driven backend for tests and dry runs.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use sha2::{Digest, Sha256};

use crate::backend::{Backend, ConcurrencyProbe};
use crate::error::GatewayError;
use crate::types::{DecodeMode, FinishReason, GenerationRequest, GenerationResult, TokenLogProbs};

/// Hex SHA-256 of a prompt, the key used by scripted tables.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Answers from a lookup table keyed by `(prompt digest, seed)`.
///
/// Greedy requests are looked up with no seed. Scoring splits text on
/// whitespace and assigns every token the same configured logprob.
#[derive(Default)]
pub struct ScriptedBackend {
    table: HashMap<(String, Option<i64>), String>,
    fallback: Option<String>,
    logprob: Option<f64>,
    omit_first_logprob: bool,
    failing_seeds: HashSet<i64>,
    delay: Duration,
    probe: Arc<ConcurrencyProbe>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_entry(self, prompt: &str, seed: i64, text: impl Into<String>) -> Self {
        self.with_digest_entry(prompt_digest(prompt), Some(seed), text)
    }

    pub fn with_greedy_entry(self, prompt: &str, text: impl Into<String>) -> Self {
        self.with_digest_entry(prompt_digest(prompt), None, text)
    }

    pub fn with_digest_entry(mut self, digest: impl Into<String>, seed: Option<i64>, text: impl Into<String>) -> Self {
        self.table.insert((digest.into(), seed), text.into());
        self
    }

    /// Text returned when no table entry matches.
    pub fn with_fallback(mut self, text: impl Into<String>) -> Self {
        self.fallback = Some(text.into());
        self
    }

    pub fn with_logprob(mut self, logprob: f64) -> Self {
        self.logprob = Some(logprob);
        self
    }

    pub fn omitting_first_logprob(mut self) -> Self {
        self.omit_first_logprob = true;
        self
    }

    /// Sampled requests with these seeds fail with a transport error.
    pub fn failing_seeds(mut self, seeds: impl IntoIterator<Item = i64>) -> Self {
        self.failing_seeds.extend(seeds);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn probe(&self) -> Arc<ConcurrencyProbe> {
        Arc::clone(&self.probe)
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        let _guard = self.probe.enter();
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        let seed = match req.decode_mode {
            DecodeMode::Sampled => Some(req.seed),
            DecodeMode::Greedy => None,
        };
        if seed.is_some_and(|s| self.failing_seeds.contains(&s)) {
            return Err(GatewayError::Transport(format!("scripted failure for seed {}", req.seed)));
        }
        let text = self
            .table
            .get(&(prompt_digest(&req.prompt), seed))
            .or(self.fallback.as_ref())
            .ok_or_else(|| GatewayError::Http {
                status: 404,
                body: format!("no scripted entry for prompt digest {} seed {seed:?}", prompt_digest(&req.prompt)),
            })?
            .clone();
        let token_count = text.split_whitespace().count() as u32;
        Ok(GenerationResult { text, finish_reason: FinishReason::Stop, token_count, cached: false })
    }

    async fn score_tokens(&self, _model_id: &str, text: &str) -> Result<TokenLogProbs, GatewayError> {
        let _guard = self.probe.enter();
        let logprob = self
            .logprob
            .ok_or_else(|| GatewayError::Unsupported("token scoring".into()))?;
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let mut values = vec![Some(logprob); tokens.len()];
        if self.omit_first_logprob {
            if let Some(first) = values.first_mut() {
                *first = None;
            }
        }
        TokenLogProbs::new(tokens, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn table_lookup_by_digest_and_seed() {
        let backend = ScriptedBackend::new().with_digest_entry(prompt_digest("q"), Some(3), "stored text");
        let hit = backend.generate(&GenerationRequest::sampled("m", "q", 0.7, 3, 16)).await.unwrap();
        assert_eq!(hit.text, "stored text");
        let miss = backend.generate(&GenerationRequest::sampled("m", "q", 0.7, 4, 16)).await;
        assert!(matches!(miss, Err(GatewayError::Http { status: 404, .. })));
    }

    #[tokio::test]
    async fn scoring_constant() {
        let backend = ScriptedBackend::new().with_logprob(0.5f64.ln());
        let lp = backend.score_tokens("m", "a b c d").await.unwrap();
        assert_eq!(lp.len(), 4);
        for v in lp.logprobs() {
            assert!((v.unwrap() - (-std::f64::consts::LN_2)).abs() < 1e-15);
        }
    }

    #[tokio::test]
    async fn scoring_unsupported_without_logprob() {
        let err = ScriptedBackend::new().score_tokens("m", "a").await.unwrap_err();
        assert!(err.is_unsupported());
    }
}
