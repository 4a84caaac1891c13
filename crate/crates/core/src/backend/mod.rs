//! Completion backends that turn a [`SegmentationRequest`] into raw mapping
//! JSON.
//!
//! Three kinds exist: `Remote` talks to an OpenAI-compatible endpoint with a
//! structured-output schema, `Mock` replays fixtures, and `RuleBased` is a
//! deterministic offline aligner. Any backend can be wrapped in a
//! [`Limited`] to bound the number of in-flight calls.

mod mock;
mod remote;
mod rule_based;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::prompting::SegmentationRequest;

pub use mock::MockBackend;
pub use remote::RemoteBackend;
pub use rule_based::{rule_based_segment, RuleBasedBackend};

pub const API_KEY_ENV: &str = "EIPL_API_KEY";
pub const BASE_URL_ENV: &str = "EIPL_BASE_URL";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Mock,
    RuleBased,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(BackendKind::Remote),
            "mock" => Ok(BackendKind::Mock),
            "rule-based" | "rule_based" => Ok(BackendKind::RuleBased),
            other => Err(format!("unknown backend `{other}` (remote, mock, rule-based)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: BackendKind,
    pub model_name: String,
    pub retry_count: u32,
    /// Not serialized so that outputs stay byte-stable across runs.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl Provenance {
    pub fn mock() -> Self {
        Self {
            backend: BackendKind::Mock,
            model_name: "mock".into(),
            retry_count: 0,
            wall_time: Duration::ZERO,
        }
    }

    pub fn rule_based() -> Self {
        Self {
            backend: BackendKind::RuleBased,
            model_name: "rule-based".into(),
            retry_count: 0,
            wall_time: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawMappingText {
    pub text: String,
    pub provenance: Provenance,
}

impl RawMappingText {
    pub fn new(text: impl Into<String>, provenance: Provenance) -> Self {
        Self {
            text: text.into(),
            provenance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("backend refused the output schema: {0}")]
    SchemaRefused(String),
    #[error("backend rejected the request with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("no fixture for question `{question_id}` and this response")]
    MissingFixture { question_id: String },
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited { .. })
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &SegmentationRequest) -> Result<RawMappingText, BackendError>;
}

#[async_trait]
impl<B: Backend + ?Sized> Backend for Arc<B> {
    async fn complete(&self, request: &SegmentationRequest) -> Result<RawMappingText, BackendError> {
        (**self).complete(request).await
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout: Duration,
    pub concurrency_limit: usize,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::RuleBased,
            base_url: None,
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout: Duration::from_secs(60),
            concurrency_limit: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.concurrency_limit == 0 {
            return Err(BackendError::Config("concurrency_limit must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Config("temperature must be >= 0".into()));
        }
        if self.kind == BackendKind::Remote && self.base_url.is_none() {
            return Err(BackendError::Config(format!("remote backend needs a base URL (set {BASE_URL_ENV})")));
        }
        Ok(())
    }
}

/// Exponential backoff. Delays never decrease within one request, and a
/// server `Retry-After` can only lengthen a delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based), given the previous delay
    /// and any server hint.
    pub fn delay(&self, retry: u32, previous: Duration, retry_after: Option<Duration>) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        let backoff = self.base_delay.saturating_mul(factor).min(self.max_delay);
        backoff.max(previous).max(retry_after.unwrap_or(Duration::ZERO))
    }
}

/// Builds the backend named by `config`, wrapped in a concurrency limiter.
/// `Remote` reads its key from [`API_KEY_ENV`].
pub fn build_backend(config: &BackendConfig, mock: Option<MockBackend>) -> Result<Arc<dyn Backend>, BackendError> {
    config.validate()?;
    let limit = config.concurrency_limit;
    Ok(match config.kind {
        BackendKind::RuleBased => Arc::new(Limited::new(RuleBasedBackend, limit)),
        BackendKind::Mock => Arc::new(Limited::new(mock.unwrap_or_default(), limit)),
        BackendKind::Remote => {
            let key = std::env::var(API_KEY_ENV)
                .map_err(|_| BackendError::Config(format!("{API_KEY_ENV} is not set")))?;
            Arc::new(Limited::new(RemoteBackend::new(config.clone(), key)?, limit))
        }
    })
}

/// Admits at most `limit` concurrent calls into the wrapped backend.
pub struct Limited<B> {
    inner: B,
    permits: Semaphore,
}

impl<B> Limited<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            permits: Semaphore::new(limit.max(1)),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

#[async_trait]
impl<B: Backend> Backend for Limited<B> {
    async fn complete(&self, request: &SegmentationRequest) -> Result<RawMappingText, BackendError> {
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        self.inner.complete(request).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::build_request;
    use crate::testdata;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn backoff_is_nondecreasing() {
        let p = RetryPolicy {
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(1000),
        };
        let hints = [None, Some(Duration::from_millis(700)), None, Some(Duration::from_millis(5)), None, None];
        let mut prev = Duration::ZERO;
        let mut seen = Vec::new();
        for (i, hint) in hints.into_iter().enumerate() {
            let d = p.delay(i as u32 + 1, prev, hint);
            assert!(d >= prev);
            seen.push(d.as_millis());
            prev = d;
        }
        assert_eq!(seen, [100, 700, 700, 800, 1000, 1000]);
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let remote = BackendConfig {
            kind: BackendKind::Remote,
            ..Default::default()
        };
        assert!(matches!(remote.validate(), Err(BackendError::Config(_))));
        let zero = BackendConfig {
            concurrency_limit: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        assert_eq!(BackendConfig::default().model_name, "gpt-4o");
        assert_eq!(BackendConfig::default().temperature, 0.0);
    }

    struct Gauge {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    #[async_trait]
    impl Backend for Gauge {
        async fn complete(&self, _request: &SegmentationRequest) -> Result<RawMappingText, BackendError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(5)).await;
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(RawMappingText::new("{\"groups\":[]}", Provenance::mock()))
        }
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn limiter_bounds_in_flight_calls() {
        let limited = Arc::new(Limited::new(
            Gauge {
                current: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            },
            3,
        ));
        let q = testdata::sum_of_positives();
        let req = Arc::new(build_request(&q, "x").unwrap());
        let tasks: Vec<_> = (0..20)
            .map(|_| {
                let l = limited.clone();
                let r = req.clone();
                tokio::spawn(async move { l.complete(&r).await })
            })
            .collect();
        for t in tasks {
            t.await.unwrap().unwrap();
        }
        let peak = limited.inner().peak.load(Ordering::SeqCst);
        assert!((1..=3).contains(&peak), "{peak}");
    }
}
