//! HTTP front for [`MockBackends`], speaking the same wire shapes as the real
//! services so the HTTP clients can be exercised end to end.

use std::net::SocketAddr;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::http::{PROBLEM_HEADER, ROLE_HEADER, STAGE_HEADER};
use super::mock::{MockBackends, Role};
use super::{CompletionRequest, RequestMeta};
use crate::error::BackendError;

fn header(h: &HeaderMap, name: &str) -> String {
    h.get(name)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string()
}

fn meta(h: &HeaderMap) -> RequestMeta {
    RequestMeta::new(header(h, STAGE_HEADER), header(h, PROBLEM_HEADER), 0)
}

fn error_response(e: BackendError) -> Response {
    let status = match &e {
        BackendError::RateLimited(_) => StatusCode::TOO_MANY_REQUESTS,
        BackendError::Server { status, .. } => {
            StatusCode::from_u16(*status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR)
        }
        BackendError::Transport(_) => StatusCode::BAD_GATEWAY,
        BackendError::ScriptedGap { .. } => StatusCode::NOT_FOUND,
        _ => StatusCode::BAD_REQUEST,
    };
    (status, e.to_string()).into_response()
}

#[derive(Deserialize)]
struct ChatBody {
    messages: Vec<ChatMessage>,
    #[serde(default = "one")]
    n: u32,
    #[serde(default)]
    temperature: f64,
    #[serde(default = "one")]
    max_tokens: u32,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

async fn chat(State(mock): State<MockBackends>, headers: HeaderMap, Json(body): Json<ChatBody>) -> Response {
    let role = match header(&headers, ROLE_HEADER).as_str() {
        "prover" => Role::Prover,
        _ => Role::Reasoner,
    };
    let req = CompletionRequest {
        prompt: body
            .messages
            .into_iter()
            .map(|m| m.content)
            .collect::<Vec<_>>()
            .join("\n"),
        temperature: body.temperature,
        max_tokens: body.max_tokens,
        n_samples: body.n,
    };
    match mock.complete_as(role, &meta(&headers), &req).await {
        Ok(c) => {
            let choices: Vec<_> = c
                .texts
                .into_iter()
                .enumerate()
                .map(|(i, t)| json!({"index": i, "message": {"role": "assistant", "content": t}}))
                .collect();
            Json(json!({ "choices": choices })).into_response()
        }
        Err(e) => error_response(e),
    }
}

#[derive(Deserialize)]
struct VerifyBody {
    code: String,
}

async fn verify(State(mock): State<MockBackends>, headers: HeaderMap, Json(body): Json<VerifyBody>) -> Response {
    // The wire verdict is sorry-agnostic; the client applies its own mode.
    match mock.verify_source(&meta(&headers), &body.code, true).await {
        Ok(r) => Json(json!({
            "accepted": r.accepted,
            "sorry_present": r.sorry_present,
            "diagnostics": r.diagnostics,
        }))
        .into_response(),
        Err(e) => error_response(e),
    }
}

#[derive(Deserialize)]
struct EmbedBody {
    input: Vec<String>,
}

async fn embeddings(State(mock): State<MockBackends>, headers: HeaderMap, Json(body): Json<EmbedBody>) -> Response {
    match mock.embed_texts(&meta(&headers), &body.input).await {
        Ok(vs) => {
            let data: Vec<_> = vs
                .into_iter()
                .enumerate()
                .map(|(i, v)| json!({"index": i, "embedding": v}))
                .collect();
            Json(json!({ "data": data })).into_response()
        }
        Err(e) => error_response(e),
    }
}

async fn counters(State(mock): State<MockBackends>) -> Response {
    Json(mock.counters()).into_response()
}

pub fn mock_router(mock: MockBackends) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/verify", post(verify))
        .route("/v1/embeddings", post(embeddings))
        .route("/counters", get(counters))
        .with_state(mock)
}

/// A running mock server. Dropping it shuts the server down.
pub struct MockServer {
    pub addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Serve until the process is interrupted or the server is dropped.
    pub async fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn serve_mock(mock: MockBackends, addr: SocketAddr) -> std::io::Result<MockServer> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = mock_router(mock);
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(MockServer {
        addr,
        shutdown: Some(tx),
        handle: Some(handle),
    })
}
