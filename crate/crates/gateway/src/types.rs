//! Request and response types shared by every backend.

use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

/// How the endpoint should pick tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Sampled,
    Greedy,
}

/// A single-turn generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_id: String,
    /// Sent as the sole user message.
    pub prompt: String,
    pub temperature: f64,
    pub seed: i64,
    pub max_tokens: u32,
    pub decode_mode: DecodeMode,
}

impl GenerationRequest {
    pub fn sampled(model_id: impl Into<String>, prompt: impl Into<String>, temperature: f64, seed: i64, max_tokens: u32) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature,
            seed,
            max_tokens,
            decode_mode: DecodeMode::Sampled,
        }
    }

    pub fn greedy(model_id: impl Into<String>, prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            model_id: model_id.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            seed: 0,
            max_tokens,
            decode_mode: DecodeMode::Greedy,
        }
    }

    /// Temperature actually sent to the endpoint. Greedy decoding always uses 0.
    pub fn effective_temperature(&self) -> f64 {
        match self.decode_mode {
            DecodeMode::Greedy => 0.0,
            DecodeMode::Sampled => self.temperature,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.is_empty() {
            return Err(GatewayError::InvalidRequest("model_id is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

impl FinishReason {
    /// Maps the endpoint's `finish_reason` string.
    pub fn from_wire(s: Option<&str>) -> Self {
        match s {
            Some("stop") | Some("eos") | Some("end_turn") | None => FinishReason::Stop,
            Some("length") | Some("max_tokens") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub token_count: u32,
    #[serde(default)]
    pub cached: bool,
}

/// Per-token conditional log-probabilities of a text.
///
/// Some endpoints return no logprob for the first token; those positions hold
/// `None` and are excluded from averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    tokens: Vec<String>,
    logprobs: Vec<Option<f64>>,
}

impl TokenLogProbs {
    pub fn new(tokens: Vec<String>, logprobs: Vec<Option<f64>>) -> Result<Self, GatewayError> {
        if tokens.len() != logprobs.len() {
            return Err(GatewayError::Decode(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            )));
        }
        if let Some((i, lp)) = logprobs
            .iter()
            .enumerate()
            .find_map(|(i, lp)| lp.filter(|v| v.is_nan() || *v > 0.0).map(|v| (i, v)))
        {
            return Err(GatewayError::Decode(format!(
                "logprob at position {i} is {lp}, expected a value <= 0"
            )));
        }
        Ok(Self { tokens, logprobs })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn logprobs(&self) -> &[Option<f64>] {
        &self.logprobs
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Logprobs that can enter an average.
    pub fn usable(&self) -> impl Iterator<Item = f64> + '_ {
        self.logprobs.iter().filter_map(|lp| *lp)
    }

    pub fn usable_count(&self) -> usize {
        self.logprobs.iter().filter(|lp| lp.is_some()).count()
    }

    /// True when the endpoint omitted the first token's logprob.
    pub fn first_missing(&self) -> bool {
        matches!(self.logprobs.first(), Some(None))
    }
}

/// Connection settings for a remote endpoint.
#[derive(Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    /// Never serialized; supplied from the environment.
    #[serde(skip)]
    pub api_key: Option<String>,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    #[serde(with = "duration_secs")]
    pub timeout: Duration,
    /// First backoff delay; doubles per retry.
    #[serde(with = "duration_secs", default = "default_backoff")]
    pub backoff_base: Duration,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_backoff() -> Duration {
    Duration::from_millis(500)
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            api_key: None,
            max_in_flight: 8,
            retry_limit: 3,
            timeout: Duration::from_secs(120),
            backoff_base: default_backoff(),
            cache_dir: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidRequest("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

impl fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("max_in_flight", &self.max_in_flight)
            .field("retry_limit", &self.retry_limit)
            .field("timeout", &self.timeout)
            .field("backoff_base", &self.backoff_base)
            .field("cache_dir", &self.cache_dir)
            .finish()
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}
