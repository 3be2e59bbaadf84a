// ureq::Error is large; it only lives inside the retry loop
#![allow(clippy::result_large_err)]

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use super::{ModelCapabilities, ModelResponse, PredictRequest, ProtocolError};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// Connection-level failure (refused, reset, timed out) after all retries.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    /// The backend answered, but not with a valid protocol message.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The backend refused the request (4xx).
    #[error("backend rejected request (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("invalid request: {0}")]
    Invalid(#[from] ProtocolError),
    #[error("capability violation: backend {model_id} lacks {capability}")]
    Capability { model_id: String, capability: &'static str },
    #[error("{0}")]
    Other(String),
}

impl ClientError {
    pub fn is_transport(&self) -> bool {
        matches!(self, ClientError::Transport { .. })
    }
}

/// Anything that answers predict requests: an HTTP endpoint, an in-process
/// mock or a response store.
pub trait Backend: Send + Sync {
    fn capabilities(&self) -> Result<ModelCapabilities, ClientError>;
    fn predict(&self, req: &PredictRequest) -> Result<ModelResponse, ClientError>;
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub timeout: Duration,
    /// Extra attempts after the first one, for transport failures and 5xx.
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            timeout: Duration::from_secs(60),
            retries: 2,
            backoff: Duration::from_millis(50),
        }
    }
}

pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
    config: ClientConfig,
    caps: OnceLock<ModelCapabilities>,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

impl HttpBackend {
    pub fn new(endpoint: &str, config: ClientConfig) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        HttpBackend {
            base: endpoint.trim_end_matches('/').to_string(),
            agent,
            config,
            caps: OnceLock::new(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn classify(result: Result<ureq::Response, ureq::Error>) -> Result<Attempt<String>, ClientError> {
        match result {
            Ok(resp) => resp
                .into_string()
                .map(Attempt::Done)
                .map_err(|e| ClientError::Protocol(format!("unreadable body: {e}"))),
            Err(ureq::Error::Status(status, resp)) if status >= 500 => {
                let body = resp.into_string().unwrap_or_default();
                Ok(Attempt::Retry(format!("HTTP {status}: {body}")))
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let message = serde_json::from_str::<serde_json::Value>(&body)
                    .ok()
                    .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(String::from))
                    .unwrap_or(body);
                Err(ClientError::Rejected { status, message })
            }
            Err(ureq::Error::Transport(t)) => Ok(Attempt::Retry(t.to_string())),
        }
    }

    fn with_retries(&self, mut send: impl FnMut() -> Result<ureq::Response, ureq::Error>) -> Result<String, ClientError> {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match Self::classify(send())? {
                Attempt::Done(body) => return Ok(body),
                Attempt::Retry(msg) => last = msg,
            }
            if attempt < attempts {
                thread::sleep(self.config.backoff * attempt);
            }
        }
        Err(ClientError::Transport {
            attempts,
            message: last,
        })
    }

    pub fn fetch_capabilities(&self) -> Result<ModelCapabilities, ClientError> {
        let url = format!("{}/capabilities", self.base);
        let body = self.with_retries(|| self.agent.get(&url).call())?;
        serde_json::from_str(&body).map_err(|e| ClientError::Protocol(format!("capabilities: {e}")))
    }

    fn cached_capabilities(&self) -> Result<&ModelCapabilities, ClientError> {
        if let Some(c) = self.caps.get() {
            return Ok(c);
        }
        let c = self.fetch_capabilities()?;
        Ok(self.caps.get_or_init(|| c))
    }

    /// Sends one request. Validation and the capability check happen before
    /// anything goes on the wire; retries resend the identical body.
    pub fn send_predict(&self, req: &PredictRequest) -> Result<ModelResponse, ClientError> {
        req.validate()?;
        let caps = self.cached_capabilities()?;
        check_capabilities(req, caps)?;

        let url = format!("{}/predict", self.base);
        let body = serde_json::to_string(req).expect("request serializes");
        let text = self.with_retries(|| {
            self.agent
                .post(&url)
                .set("Content-Type", "application/json")
                .send_string(&body)
        })?;
        let resp: ModelResponse =
            serde_json::from_str(&text).map_err(|e| ClientError::Protocol(format!("predict: {e}")))?;
        check_response(req, &resp)?;
        Ok(resp)
    }
}

pub(crate) fn check_response(req: &PredictRequest, resp: &ModelResponse) -> Result<(), ClientError> {
    if resp.request_id != req.request_id {
        return Err(ClientError::Protocol(
            ProtocolError::RequestIdMismatch {
                expected: req.request_id.clone(),
                got: resp.request_id.clone(),
            }
            .to_string(),
        ));
    }
    resp.validate().map_err(|e| ClientError::Protocol(e.to_string()))
}

pub fn check_capabilities(req: &PredictRequest, caps: &ModelCapabilities) -> Result<(), ClientError> {
    if req.permitted_by(caps) {
        Ok(())
    } else {
        Err(ClientError::Capability {
            model_id: caps.model_id.clone(),
            capability: req.required_capability().unwrap_or("unknown"),
        })
    }
}

impl Backend for HttpBackend {
    fn capabilities(&self) -> Result<ModelCapabilities, ClientError> {
        self.cached_capabilities().cloned()
    }

    fn predict(&self, req: &PredictRequest) -> Result<ModelResponse, ClientError> {
        self.send_predict(req)
    }
}
