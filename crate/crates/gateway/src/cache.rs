//! Content-addressed response cache: one JSON file per request digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::GatewayError;
use crate::types::{DecodeMode, GenerationRequest, GenerationResult, TokenLogProbs};

#[derive(Serialize)]
struct GenerationKey<'a> {
    kind: &'static str,
    model_id: &'a str,
    prompt: &'a str,
    temperature: f64,
    seed: i64,
    decode_mode: DecodeMode,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ScoreKey<'a> {
    kind: &'static str,
    model_id: &'a str,
    text: &'a str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest identifying a generation request in the cache.
pub fn generation_digest(req: &GenerationRequest) -> String {
    let key = GenerationKey {
        kind: "generate",
        model_id: &req.model_id,
        prompt: &req.prompt,
        temperature: req.effective_temperature(),
        seed: req.seed,
        decode_mode: req.decode_mode,
        max_tokens: req.max_tokens,
    };
    sha256_hex(&serde_json::to_vec(&key).expect("key serializes"))
}

pub fn score_digest(model_id: &str, text: &str) -> String {
    let key = ScoreKey { kind: "score", model_id, text };
    sha256_hex(&serde_json::to_vec(&key).expect("key serializes"))
}

#[derive(Serialize, Deserialize)]
struct GenerationEntry {
    request: GenerationRequest,
    result: GenerationResult,
}

#[derive(Serialize, Deserialize)]
struct ScoreEntry {
    model_id: String,
    text: String,
    scores: TokenLogProbs,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub async fn get_generation(&self, req: &GenerationRequest) -> Option<GenerationResult> {
        let entry: GenerationEntry = self.read(&generation_digest(req)).await?;
        let mut result = entry.result;
        result.cached = true;
        Some(result)
    }

    pub async fn put_generation(&self, req: &GenerationRequest, result: &GenerationResult) -> Result<(), GatewayError> {
        let mut result = result.clone();
        result.cached = false;
        let entry = GenerationEntry { request: req.clone(), result };
        self.write(&generation_digest(req), &entry).await
    }

    pub async fn get_scores(&self, model_id: &str, text: &str) -> Option<TokenLogProbs> {
        let entry: ScoreEntry = self.read(&score_digest(model_id, text)).await?;
        Some(entry.scores)
    }

    pub async fn put_scores(&self, model_id: &str, text: &str, scores: &TokenLogProbs) -> Result<(), GatewayError> {
        let entry = ScoreEntry {
            model_id: model_id.to_string(),
            text: text.to_string(),
            scores: scores.clone(),
        };
        self.write(&score_digest(model_id, text), &entry).await
    }

    async fn read<T: for<'de> Deserialize<'de>>(&self, digest: &str) -> Option<T> {
        let path = self.path_for(digest);
        let bytes = tokio::fs::read(&path).await.ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring unreadable cache entry");
                None
            }
        }
    }

    async fn write<T: Serialize>(&self, digest: &str, value: &T) -> Result<(), GatewayError> {
        let path = self.path_for(digest);
        let bytes = serde_json::to_vec_pretty(value).map_err(|e| GatewayError::Cache(e.to_string()))?;
        // Write-then-rename so a crash never leaves a truncated entry behind.
        let tmp = self.dir.join(format!("{digest}.{}.tmp", rand::random::<u64>()));
        tokio::fs::write(&tmp, &bytes)
            .await
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", tmp.display())))?;
        tokio::fs::rename(&tmp, &path)
            .await
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))
    }
}
