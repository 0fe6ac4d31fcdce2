//! Remote chat-completion backend over HTTP.
//!
//! Wire shape: POST JSON {model, messages:[{role,content}], temperature,
//! max_tokens}; the first choice's message content is the result and
//! everything else is ignored. Credential comes from `RTNER_API_KEY`,
//! endpoint from `RTNER_API_BASE` (overridable in params).

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{Backend, BackendResponse, ChatRequest};

pub const API_KEY_VAR: &str = "RTNER_API_KEY";
pub const API_BASE_VAR: &str = "RTNER_API_BASE";

#[derive(Debug, Clone, Default)]
pub struct RemoteParams {
    /// Full endpoint URL; falls back to `RTNER_API_BASE`.
    pub endpoint: Option<String>,
    /// Bearer credential; falls back to `RTNER_API_KEY`.
    pub api_key: Option<String>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug)]
pub struct RemoteBackend {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(params: RemoteParams) -> Result<Self> {
        let endpoint = params
            .endpoint
            .or_else(|| std::env::var(API_BASE_VAR).ok())
            .ok_or_else(|| {
                Error::BackendConfig(format!("missing endpoint: set {API_BASE_VAR}"))
            })?;
        let api_key = params
            .api_key
            .or_else(|| std::env::var(API_KEY_VAR).ok())
            .ok_or_else(|| {
                Error::BackendConfig(format!("missing credential: set {API_KEY_VAR}"))
            })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(params.timeout_secs.unwrap_or(120)))
            .build()?;
        Ok(RemoteBackend {
            endpoint,
            api_key,
            client,
        })
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: WireUsage,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl Backend for RemoteBackend {
    fn call(&self, request: &ChatRequest) -> Result<BackendResponse> {
        let body = serde_json::json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()?;
        let status = response.status();
        let text = response.text()?;
        if !status.is_success() {
            return Err(Error::HttpStatus {
                status: status.as_u16(),
                body: text,
            });
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedResponse(format!("{e}: {text}")))?;
        let first = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::MalformedResponse("response has no choices".into()))?;
        Ok(BackendResponse {
            text: first.message.content,
            prompt_tokens: wire.usage.prompt_tokens,
            completion_tokens: wire.usage.completion_tokens,
        })
    }

    fn describe(&self) -> String {
        format!("remote[{}]", self.endpoint)
    }
}
