//! Backend speaking the open chat-completions / completions JSON protocol.

use async_trait::async_trait;
use serde_json::{json, Value};

use crate::backend::Backend;
use crate::error::GatewayError;
use crate::types::{BackendConfig, FinishReason, GenerationRequest, GenerationResult, TokenLogProbs};

pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        let client = reqwest::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            base_url: cfg.base_url.trim_end_matches('/').to_string(),
            api_key: cfg.api_key.clone(),
        })
    }

    async fn post(&self, route: &str, body: &Value) -> Result<Value, GatewayError> {
        let mut req = self.client.post(format!("{}/{route}", self.base_url)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(map_reqwest)?;
        let status = resp.status();
        let text = resp.text().await.map_err(map_reqwest)?;
        if !status.is_success() {
            return Err(GatewayError::Http { status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Decode(format!("{e}: {text}")))
    }
}

fn map_reqwest(e: reqwest::Error) -> GatewayError {
    if e.is_timeout() {
        GatewayError::Timeout
    } else {
        GatewayError::Transport(e.to_string())
    }
}

fn chat_body(req: &GenerationRequest) -> Value {
    json!({
        "model": req.model_id,
        "messages": [{ "role": "user", "content": req.prompt }],
        "temperature": req.effective_temperature(),
        "seed": req.seed,
        "max_tokens": req.max_tokens,
        "stream": false,
    })
}

fn parse_chat(body: &Value) -> Result<GenerationResult, GatewayError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| GatewayError::Decode(format!("no choices in response: {body}")))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let finish_reason = FinishReason::from_wire(choice.get("finish_reason").and_then(Value::as_str));
    let token_count = body
        .pointer("/usage/completion_tokens")
        .and_then(Value::as_u64)
        .unwrap_or(0) as u32;
    Ok(GenerationResult { text, finish_reason, token_count, cached: false })
}

/// Extracts the echoed prompt tokens from a completions response made with
/// `echo: true, logprobs: 1, max_tokens: 1`.
fn parse_echo_logprobs(body: &Value, text: &str) -> Result<TokenLogProbs, GatewayError> {
    let logprobs = body
        .pointer("/choices/0/logprobs")
        .filter(|v| !v.is_null())
        .ok_or_else(|| GatewayError::Unsupported("echo logprobs (response has no logprobs)".into()))?;
    let tokens: Vec<String> = logprobs
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Unsupported("echo logprobs (no token list)".into()))?
        .iter()
        .map(|t| t.as_str().unwrap_or_default().to_string())
        .collect();
    let values: Vec<Option<f64>> = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Unsupported("echo logprobs (no token_logprobs)".into()))?
        .iter()
        .map(Value::as_f64)
        .collect();
    if tokens.len() != values.len() {
        return Err(GatewayError::Decode("tokens and token_logprobs differ in length".into()));
    }

    // Keep only tokens that belong to the echoed prompt, not the generated one.
    let keep = match logprobs.get("text_offset").and_then(Value::as_array) {
        Some(offsets) => offsets
            .iter()
            .take_while(|o| o.as_u64().is_some_and(|o| (o as usize) < text.len()))
            .count(),
        None => tokens.len().saturating_sub(1),
    };
    let tokens = tokens.into_iter().take(keep).collect();
    let values = values.into_iter().take(keep).collect();
    TokenLogProbs::new(tokens, values)
}

#[async_trait]
impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        let body = self.post("chat/completions", &chat_body(req)).await?;
        parse_chat(&body)
    }

    async fn score_tokens(&self, model_id: &str, text: &str) -> Result<TokenLogProbs, GatewayError> {
        let body = json!({
            "model": model_id,
            "prompt": text,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let resp = match self.post("completions", &body).await {
            Err(GatewayError::Http { status, body }) if matches!(status, 400 | 404 | 405 | 501) => {
                return Err(GatewayError::Unsupported(format!("echo logprobs (HTTP {status}: {body})")));
            }
            other => other?,
        };
        parse_echo_logprobs(&resp, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_uses_effective_temperature() {
        let mut req = GenerationRequest::greedy("m", "hello", 16);
        req.temperature = 0.7;
        let body = chat_body(&req);
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["content"], "hello");
        assert_eq!(body["seed"], 0);
    }

    #[test]
    fn parses_chat_response() {
        let body = json!({
            "choices": [{ "message": { "role": "assistant", "content": "Yes" }, "finish_reason": "stop" }],
            "usage": { "completion_tokens": 1 }
        });
        let r = parse_chat(&body).unwrap();
        assert_eq!(r.text, "Yes");
        assert_eq!(r.finish_reason, FinishReason::Stop);
        assert_eq!(r.token_count, 1);
    }

    #[test]
    fn echo_logprobs_drop_generated_token() {
        let text = "ab cd";
        let body = json!({ "choices": [{ "logprobs": {
            "tokens": ["ab", " cd", " x"],
            "token_logprobs": [null, -1.5, -0.2],
            "text_offset": [0, 2, 5]
        }}]});
        let lp = parse_echo_logprobs(&body, text).unwrap();
        assert_eq!(lp.tokens(), &["ab".to_string(), " cd".to_string()]);
        assert_eq!(lp.logprobs(), &[None, Some(-1.5)]);
        assert!(lp.first_missing());
    }

    #[test]
    fn echo_logprobs_without_offsets_drop_last() {
        let body = json!({ "choices": [{ "logprobs": {
            "tokens": ["a", "b", "c"],
            "token_logprobs": [-0.1, -0.2, -0.3]
        }}]});
        let lp = parse_echo_logprobs(&body, "ab").unwrap();
        assert_eq!(lp.len(), 2);
    }

    #[test]
    fn missing_logprobs_is_unsupported() {
        let body = json!({ "choices": [{ "text": "x", "logprobs": null }]});
        assert!(parse_echo_logprobs(&body, "x").unwrap_err().is_unsupported());
    }
}
