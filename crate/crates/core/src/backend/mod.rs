//! Language-model backend protocol.
//!
//! Four roles share one request/response style (JSON over HTTP POST):
//!
//! | role      | path           | request                                          | response                         |
//! |-----------|----------------|--------------------------------------------------|----------------------------------|
//! | score     | `/v1/score`    | `prompt_text, mask_offset, choices, soft_slot_len` | per choice `log_likelihood, token_count` |
//! | generate  | `/v1/generate` | `prompt_text, max_new_tokens, temperature`       | `completion_text`                |
//! | translate | `/v1/translate`| `text, source, target`                           | `text`                           |
//! | embed     | `/v1/embed`    | `texts`                                          | `vectors, dim`                   |
//!
//! plus `/v1/refresh`, the opaque "model was retrained" hook used by
//! self-training. Callers program against the traits below; [`http`] talks to
//! a remote service, [`mock`] answers in-process and [`server`] exposes any
//! backend on loopback.

pub mod http;
pub mod mock;
pub mod server;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Score,
    Generate,
    Translate,
    Embed,
}

impl Role {
    pub fn path(self) -> &'static str {
        match self {
            Role::Score => "/v1/score",
            Role::Generate => "/v1/generate",
            Role::Translate => "/v1/translate",
            Role::Embed => "/v1/embed",
        }
    }
}

pub const REFRESH_PATH: &str = "/v1/refresh";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    pub role: Role,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_in_flight() -> usize {
    8
}

impl BackendEndpoint {
    pub fn new(base_url: impl Into<String>, role: Role) -> Self {
        Self {
            base_url: base_url.into(),
            role,
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub prompt_text: String,
    pub mask_offset: usize,
    pub choices: Vec<String>,
    #[serde(default)]
    pub soft_slot_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceLikelihood {
    pub choice: String,
    pub log_likelihood: f64,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreResponse {
    pub choices: Vec<ChoiceLikelihood>,
}

impl ScoreResponse {
    /// One finite entry per requested choice, in request order.
    pub fn validate(&self, req: &ScoreRequest) -> Result<(), BackendError> {
        if self.choices.len() != req.choices.len() {
            return Err(BackendError::Protocol(format!(
                "expected {} choice scores, got {}",
                req.choices.len(),
                self.choices.len()
            )));
        }
        for (got, want) in self.choices.iter().zip(&req.choices) {
            if &got.choice != want {
                return Err(BackendError::Protocol(format!(
                    "choice order mismatch: expected {want:?}, got {:?}",
                    got.choice
                )));
            }
            if got.token_count == 0 {
                return Err(BackendError::Protocol(format!("choice {want:?} has token_count 0")));
            }
            if !got.log_likelihood.is_finite() {
                return Err(BackendError::Protocol(format!(
                    "choice {want:?} has non-finite log-likelihood"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt_text: String,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
}

impl GenerateRequest {
    pub fn greedy(prompt_text: impl Into<String>, max_new_tokens: u32) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            max_new_tokens,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateResponse {
    pub completion_text: String,
    /// Per-token log-probabilities of the decoded completion, when the
    /// backend reports them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateRequest {
    pub text: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

impl EmbedResponse {
    pub fn validate(&self, req: &EmbedRequest) -> Result<(), BackendError> {
        if self.vectors.len() != req.texts.len() {
            return Err(BackendError::Protocol(format!(
                "expected {} vectors, got {}",
                req.texts.len(),
                self.vectors.len()
            )));
        }
        if let Some(v) = self.vectors.iter().find(|v| v.len() != self.dim) {
            return Err(BackendError::Protocol(format!(
                "vector of length {} does not match dim {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefreshRequest {
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefreshResponse {
    pub model_version: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("endpoint has role {actual:?}, cannot serve {wanted:?}")]
    WrongRole { wanted: Role, actual: Role },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    /// Timeouts, transport failures, 429 and 5xx are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait ScoreBackend: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError>;
}

pub trait GenerateBackend: Send + Sync {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError>;
}

pub trait TranslateBackend: Send + Sync {
    fn translate(&self, req: &TranslateRequest) -> Result<TranslateResponse, BackendError>;
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError>;
}

pub trait RefreshBackend: Send + Sync {
    fn refresh(&self, req: &RefreshRequest) -> Result<RefreshResponse, BackendError>;
}

/// Everything the mock server can expose.
pub trait FullBackend: ScoreBackend + GenerateBackend + TranslateBackend + EmbedBackend + RefreshBackend {}

impl<T> FullBackend for T where T: ScoreBackend + GenerateBackend + TranslateBackend + EmbedBackend + RefreshBackend {}

macro_rules! closure_backend {
    ($trait:ident, $method:ident, $req:ty, $resp:ty) => {
        impl<F> $trait for F
        where
            F: Fn(&$req) -> Result<$resp, BackendError> + Send + Sync,
        {
            fn $method(&self, req: &$req) -> Result<$resp, BackendError> {
                self(req)
            }
        }
    };
}

closure_backend!(ScoreBackend, score, ScoreRequest, ScoreResponse);
closure_backend!(GenerateBackend, generate, GenerateRequest, GenerateResponse);
closure_backend!(TranslateBackend, translate, TranslateRequest, TranslateResponse);
closure_backend!(EmbedBackend, embed, EmbedRequest, EmbedResponse);
closure_backend!(RefreshBackend, refresh, RefreshRequest, RefreshResponse);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 100,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1 << failed_attempt.min(16)))
    }

    /// Runs `call` up to `attempts` times with exponential backoff between
    /// retryable failures.
    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut attempt = 0;
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    attempt += 1;
                    if attempt >= attempts {
                        return Err(BackendError::Exhausted {
                            attempts,
                            last: Box::new(e),
                        });
                    }
                    tracing::debug!(attempt, error = %e, "retrying backend call");
                    std::thread::sleep(self.backoff(attempt - 1));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug)]
pub struct InFlight {
    limit: usize,
    state: Mutex<(usize, usize)>, // (current, peak)
    freed: Condvar,
}

impl InFlight {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightGuard<'_> {
        let mut st = self.state.lock().expect("in-flight lock");
        while st.0 >= self.limit {
            st = self.freed.wait(st).expect("in-flight lock");
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        InFlightGuard { owner: self }
    }

    /// Highest number of simultaneous requests observed.
    pub fn peak(&self) -> usize {
        self.state.lock().expect("in-flight lock").1
    }
}

pub struct InFlightGuard<'a> {
    owner: &'a InFlight,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.owner.state.lock().expect("in-flight lock");
        st.0 -= 1;
        self.owner.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_stops_after_three_attempts() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 0,
        };
        let r: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Timeout)
        });
        assert_eq!(calls.get(), 3);
        assert!(matches!(r, Err(BackendError::Exhausted { attempts: 3, .. })));
    }

    #[test]
    fn retry_recovers_and_skips_non_retryable() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 0,
        };
        let r = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(BackendError::Http {
                    status: 503,
                    body: String::new(),
                })
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
        calls.set(0);
        let r: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Http {
                status: 422,
                body: String::new(),
            })
        });
        assert_eq!(calls.get(), 1);
        assert!(matches!(r, Err(BackendError::Http { status: 422, .. })));
    }

    #[test]
    fn backoff_is_exponential() {
        let p = RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 100,
        };
        assert_eq!(p.backoff(0), Duration::from_millis(100));
        assert_eq!(p.backoff(1), Duration::from_millis(200));
        assert_eq!(p.backoff(2), Duration::from_millis(400));
    }

    #[test]
    fn score_response_validation() {
        let req = ScoreRequest {
            prompt_text: "x".into(),
            mask_offset: 0,
            choices: vec!["a".into(), "b".into()],
            soft_slot_len: 0,
        };
        let ok = ScoreResponse {
            choices: vec![
                ChoiceLikelihood {
                    choice: "a".into(),
                    log_likelihood: -1.0,
                    token_count: 1,
                },
                ChoiceLikelihood {
                    choice: "b".into(),
                    log_likelihood: -2.0,
                    token_count: 2,
                },
            ],
        };
        assert!(ok.validate(&req).is_ok());
        let mut swapped = ok.clone();
        swapped.choices.reverse();
        assert!(swapped.validate(&req).is_err());
        let mut zero = ok.clone();
        zero.choices[0].token_count = 0;
        assert!(zero.validate(&req).is_err());
    }

    #[test]
    fn in_flight_bounds_concurrency() {
        let gate = InFlight::new(2);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _g = gate.acquire();
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(gate.peak() <= 2);
        assert!(gate.peak() >= 1);
    }
}
