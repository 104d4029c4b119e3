//! Blocking HTTP client for a backend endpoint.

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{
    BackendEndpoint, BackendError, EmbedBackend, EmbedRequest, EmbedResponse, GenerateBackend, GenerateRequest,
    GenerateResponse, InFlight, RefreshBackend, RefreshRequest, RefreshResponse, RetryPolicy, Role, ScoreBackend,
    ScoreRequest, ScoreResponse, TranslateBackend, TranslateRequest, TranslateResponse, REFRESH_PATH,
};

/// Client for one endpoint. Each attempt holds an in-flight permit; retries
/// back off without holding one.
#[derive(Clone)]
pub struct HttpBackend {
    endpoint: BackendEndpoint,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    gate: Arc<InFlight>,
}

impl HttpBackend {
    pub fn new(endpoint: BackendEndpoint, retry: RetryPolicy) -> Result<Self, BackendError> {
        if endpoint.max_in_flight == 0 {
            return Err(BackendError::Other("max_in_flight must be >= 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout())
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let gate = Arc::new(InFlight::new(endpoint.max_in_flight));
        Ok(Self {
            endpoint,
            client,
            retry,
            gate,
        })
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    /// Peak number of simultaneous requests sent through this client.
    pub fn peak_in_flight(&self) -> usize {
        self.gate.peak()
    }

    fn expect_role(&self, wanted: Role) -> Result<(), BackendError> {
        if self.endpoint.role != wanted {
            return Err(BackendError::WrongRole {
                wanted,
                actual: self.endpoint.role,
            });
        }
        Ok(())
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, req: &Req) -> Result<Resp, BackendError> {
        let url = format!("{}{}", self.endpoint.base_url.trim_end_matches('/'), path);
        self.retry.run(|| {
            let _permit = self.gate.acquire();
            let resp = self.client.post(&url).json(req).send().map_err(classify)?;
            let status = resp.status();
            if !status.is_success() {
                let body = resp.text().unwrap_or_default();
                return Err(BackendError::Http {
                    status: status.as_u16(),
                    body,
                });
            }
            let bytes = resp.bytes().map_err(classify)?;
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Protocol(e.to_string()))
        })
    }
}

fn classify(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Transport(e.to_string())
    }
}

impl ScoreBackend for HttpBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        self.expect_role(Role::Score)?;
        let resp: ScoreResponse = self.post(Role::Score.path(), req)?;
        resp.validate(req)?;
        Ok(resp)
    }
}

impl GenerateBackend for HttpBackend {
    fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        self.expect_role(Role::Generate)?;
        self.post(Role::Generate.path(), req)
    }
}

impl TranslateBackend for HttpBackend {
    fn translate(&self, req: &TranslateRequest) -> Result<TranslateResponse, BackendError> {
        self.expect_role(Role::Translate)?;
        self.post(Role::Translate.path(), req)
    }
}

impl EmbedBackend for HttpBackend {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        self.expect_role(Role::Embed)?;
        let resp: EmbedResponse = self.post(Role::Embed.path(), req)?;
        resp.validate(req)?;
        Ok(resp)
    }
}

impl RefreshBackend for HttpBackend {
    /// Model refresh lives next to the scoring model.
    fn refresh(&self, req: &RefreshRequest) -> Result<RefreshResponse, BackendError> {
        self.expect_role(Role::Score)?;
        self.post(REFRESH_PATH, req)
    }
}
