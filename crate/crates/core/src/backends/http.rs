//! HTTP clients: OpenAI-style chat completions and embeddings, Kimina-style verify.

use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;
use tokio::time::Instant;

use super::{
    BackendResult, ChatModel, Completion, CompletionRequest, Embedder, RequestMeta, Usage,
    VerificationReport, Verifier,
};
use crate::config::{ModelEndpoint, VerifierEndpoint};
use crate::error::BackendError;
use crate::textops::Diagnostic;

pub(crate) const STAGE_HEADER: &str = "x-hilbert-stage";
pub(crate) const PROBLEM_HEADER: &str = "x-hilbert-problem";
pub(crate) const ROLE_HEADER: &str = "x-hilbert-role";

fn endpoint(base: &str, path: &str) -> String {
    let base = base.trim_end_matches('/');
    if base.ends_with(path) {
        base.to_string()
    } else {
        format!("{base}{path}")
    }
}

fn config_error(msg: String) -> crate::Error {
    crate::Error::Config(crate::ConfigError::Validation(msg))
}

fn transport(e: reqwest::Error) -> BackendError {
    BackendError::Transport(e.to_string())
}

/// Map a non-success status to the error class the retry policy understands.
async fn check_status(resp: reqwest::Response) -> BackendResult<reqwest::Response> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp);
    }
    let body = resp.text().await.unwrap_or_default();
    Err(match status.as_u16() {
        429 => BackendError::RateLimited(body),
        s if s >= 500 => BackendError::Server { status: s, body },
        s => BackendError::InvalidRequest(format!("status {s}: {body}")),
    })
}

fn routed(builder: reqwest::RequestBuilder, meta: &RequestMeta, key: Option<&str>) -> reqwest::RequestBuilder {
    let b = builder
        .header(STAGE_HEADER, &meta.stage)
        .header(PROBLEM_HEADER, &meta.problem);
    match key {
        Some(k) => b.bearer_auth(k),
        None => b,
    }
}

pub struct HttpChatModel {
    client: reqwest::Client,
    role: &'static str,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatModel {
    pub fn new(client: reqwest::Client, role: &'static str, ep: &ModelEndpoint) -> crate::Result<Self> {
        let base = ep
            .url
            .as_deref()
            .ok_or_else(|| config_error(format!("backends.{role}.url is required")))?;
        Ok(Self {
            client,
            role,
            url: endpoint(base, "/v1/chat/completions"),
            model: ep.model.clone().unwrap_or_default(),
            api_key: ep.api_key.clone(),
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[async_trait]
impl ChatModel for HttpChatModel {
    async fn complete(&self, meta: &RequestMeta, req: &CompletionRequest) -> BackendResult<Completion> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "n": req.n_samples,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let resp = routed(self.client.post(&self.url), meta, self.api_key.as_deref())
            .header(ROLE_HEADER, self.role)
            .json(&body)
            .send()
            .await
            .map_err(transport)?;
        let resp = check_status(resp).await?;
        let parsed: ChatResponse = resp
            .json()
            .await
            .map_err(|e| BackendError::Protocol(format!("chat response: {e}")))?;
        Ok(Completion {
            texts: parsed
                .choices
                .into_iter()
                .map(|c| c.message.content.unwrap_or_default())
                .collect(),
            usage: parsed.usage,
        })
    }
}

pub struct HttpVerifier {
    client: reqwest::Client,
    url: String,
    timeout: Duration,
}

impl HttpVerifier {
    pub fn new(client: reqwest::Client, ep: &VerifierEndpoint) -> crate::Result<Self> {
        let base = ep
            .url
            .as_deref()
            .ok_or_else(|| config_error("backends.verifier.url is required".into()))?;
        Ok(Self {
            client,
            url: endpoint(base, "/verify"),
            timeout: Duration::from_secs(ep.timeout_s),
        })
    }
}

#[derive(Deserialize)]
struct VerifyResponse {
    accepted: bool,
    #[serde(default)]
    sorry_present: bool,
    #[serde(default)]
    diagnostics: Vec<Diagnostic>,
}

#[async_trait]
impl Verifier for HttpVerifier {
    async fn verify(
        &self,
        meta: &RequestMeta,
        source: &str,
        allow_sorry: bool,
    ) -> BackendResult<VerificationReport> {
        let start = Instant::now();
        let body = json!({"code": source, "timeout_s": self.timeout.as_secs()});
        let resp = routed(self.client.post(&self.url), meta, None)
            .timeout(self.timeout)
            .json(&body)
            .send()
            .await
            .map_err(|e| {
                if e.is_timeout() {
                    BackendError::Timeout(self.timeout)
                } else {
                    transport(e)
                }
            })?;
        let resp = check_status(resp).await?;
        let parsed: VerifyResponse = resp
            .json()
            .await
            .map_err(|e| BackendError::Protocol(format!("verify response: {e}")))?;
        Ok(VerificationReport::from_raw(
            source,
            parsed.accepted,
            parsed.diagnostics,
            parsed.sorry_present,
            allow_sorry,
            start.elapsed(),
        ))
    }
}

pub struct HttpEmbedder {
    client: reqwest::Client,
    url: String,
    model: String,
    api_key: Option<String>,
}

impl HttpEmbedder {
    pub fn new(client: reqwest::Client, ep: &ModelEndpoint) -> crate::Result<Self> {
        let base = ep
            .url
            .as_deref()
            .ok_or_else(|| config_error("backends.embedder.url is required".into()))?;
        Ok(Self {
            client,
            url: endpoint(base, "/v1/embeddings"),
            model: ep.model.clone().unwrap_or_default(),
            api_key: ep.api_key.clone(),
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

#[async_trait]
impl Embedder for HttpEmbedder {
    async fn embed(&self, meta: &RequestMeta, texts: &[String]) -> BackendResult<Vec<Vec<f32>>> {
        let body = json!({"model": self.model, "input": texts});
        let resp = routed(self.client.post(&self.url), meta, self.api_key.as_deref())
            .json(&body)
            .send()
            .await
            .map_err(transport)?;
        let resp = check_status(resp).await?;
        let mut parsed: EmbeddingResponse = resp
            .json()
            .await
            .map_err(|e| BackendError::Protocol(format!("embedding response: {e}")))?;
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}
