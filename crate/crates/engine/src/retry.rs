use std::time::Duration;

use thiserror::Error;

use crate::dispatch::DispatchPolicy;
use crate::provider::{Provider, ProviderError, ProviderRequest, ProviderResponse};
use crate::ratelimit::RateLimiter;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RetryError {
    #[error("fatal provider error after {attempts} attempt(s): {error}")]
    Fatal { error: ProviderError, attempts: u32 },
    #[error("gave up after {attempts} attempt(s): {last}")]
    ExhaustedRetries { last: ProviderError, attempts: u32 },
}

impl RetryError {
    pub fn attempts(&self) -> u32 {
        match self {
            RetryError::Fatal { attempts, .. } | RetryError::ExhaustedRetries { attempts, .. } => *attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub response: ProviderResponse,
    pub attempts: u32,
}

/// Delay before retry number `retry` (0 for the first retry):
/// `base * factor^retry`.
pub fn backoff_delay(policy: &DispatchPolicy, retry: u32) -> Duration {
    let secs = policy.backoff_base().as_secs_f64() * policy.backoff_factor.powi(retry as i32);
    Duration::from_secs_f64(secs.min(300.0))
}

/// Calls `provider` up to `max_attempts` times, backing off between
/// transient failures. Fatal errors are returned at once. Every attempt
/// waits on `limiter` when one is given.
pub async fn retrying_complete(
    provider: &dyn Provider,
    request: &ProviderRequest,
    policy: &DispatchPolicy,
    limiter: Option<&RateLimiter>,
    max_attempts: u32,
) -> Result<Completion, RetryError> {
    let max_attempts = max_attempts.max(1);
    let mut attempts = 0;
    loop {
        if let Some(limiter) = limiter {
            limiter.acquire().await;
        }
        attempts += 1;
        match provider.complete(request).await {
            Ok(response) => return Ok(Completion { response, attempts }),
            Err(error) if !error.is_retryable() => return Err(RetryError::Fatal { error, attempts }),
            Err(last) if attempts >= max_attempts => {
                return Err(RetryError::ExhaustedRetries { last, attempts })
            }
            Err(error) => {
                let delay = backoff_delay(policy, attempts - 1);
                tracing::debug!(%error, attempts, ?delay, "transient provider error, retrying");
                tokio::time::sleep(delay).await;
            }
        }
    }
}
