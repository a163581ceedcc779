use std::future::Future;
use std::time::Duration;

use rand::Rng;

use crate::error::GatewayError;

const MAX_BACKOFF: Duration = Duration::from_secs(30);

/// Exponential backoff with full jitter on top of the base delay.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retry_limit: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    pub fn new(retry_limit: u32, base_delay: Duration) -> Self {
        Self { retry_limit, base_delay }
    }

    /// Delay before retry number `retry` (0-based): `base * 2^retry + U[0, base)`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << retry.min(16));
        let jitter = if self.base_delay.is_zero() {
            Duration::ZERO
        } else {
            self.base_delay.mul_f64(rand::rng().random::<f64>())
        };
        (exp + jitter).min(MAX_BACKOFF)
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or
    /// `retry_limit + 1` attempts have been made.
    pub async fn run<T, F, Fut>(&self, mut op: F) -> Result<T, GatewayError>
    where
        F: FnMut(u32) -> Fut,
        Fut: Future<Output = Result<T, GatewayError>>,
    {
        let mut attempt = 0u32;
        loop {
            match op(attempt).await {
                Ok(v) => return Ok(v),
                Err(e) if !e.is_retryable() => return Err(e),
                Err(e) => {
                    if attempt >= self.retry_limit {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: Box::new(e),
                        });
                    }
                    let wait = self.delay(attempt);
                    tracing::debug!(attempt, ?wait, error = %e, "retrying request");
                    tokio::time::sleep(wait).await;
                    attempt += 1;
                }
            }
        }
    }
}
