//! Clients for the four external roles and the per-run instrumented session.
//!
//! Backends are trait objects so HTTP clients and in-process mocks are
//! interchangeable. [`Session`] is the only path the pipeline uses; it counts
//! every logical request into [`RunTelemetry`] before issuing it and applies
//! the retry policy underneath the count.

mod http;
mod mock;
mod server;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use http::{HttpChatModel, HttpEmbedder, HttpVerifier};
pub use mock::{
    hash_embedding, LoggedRequest, MockBackends, MockCounters, ScriptBuilder, ScriptLine, ScriptedBehavior,
};
pub use server::{mock_router, serve_mock, MockServer};

use crate::config::{Config, RetryPolicy, SamplingSettings};
use crate::error::BackendError;
use crate::telemetry::{estimate_tokens, RunTelemetry};
use crate::textops::{self, Diagnostic, Severity};

pub type BackendResult<T> = std::result::Result<T, BackendError>;

/// Routing labels attached to every request. Mocks key their scripts on
/// `(stage, problem)`; HTTP clients forward them as headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestMeta {
    pub stage: String,
    pub problem: String,
    pub depth: u32,
}

impl RequestMeta {
    pub fn new(stage: impl Into<String>, problem: impl Into<String>, depth: u32) -> Self {
        Self {
            stage: stage.into(),
            problem: problem.into(),
            depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub texts: Vec<String>,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub accepted: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub sorry_present: bool,
    #[serde(default)]
    pub elapsed_ms: u64,
}

impl VerificationReport {
    /// Apply the acceptance rule to a raw verdict: no error diagnostics, and no
    /// `sorry` unless the caller allows it.
    pub fn from_raw(
        source: &str,
        compiled: bool,
        mut diagnostics: Vec<Diagnostic>,
        sorry_flag: bool,
        allow_sorry: bool,
        elapsed: Duration,
    ) -> Self {
        let sorry_present = sorry_flag || textops::contains_sorry(source);
        if sorry_present
            && !diagnostics
                .iter()
                .any(|d| d.message.contains("declaration uses 'sorry'"))
        {
            diagnostics.push(Diagnostic {
                severity: Severity::Warning,
                line: None,
                col: None,
                message: "declaration uses 'sorry'".into(),
            });
        }
        let accepted = compiled
            && !diagnostics.iter().any(Diagnostic::is_error)
            && (allow_sorry || !sorry_present);
        Self {
            accepted,
            diagnostics,
            sorry_present,
            elapsed_ms: elapsed.as_millis() as u64,
        }
    }

    pub fn errors(&self) -> Vec<Diagnostic> {
        self.diagnostics.iter().filter(|d| d.is_error()).cloned().collect()
    }

    /// Diagnostics worth showing a model: errors, or everything when the
    /// rejection came only from a forbidden `sorry`.
    pub fn feedback(&self) -> Vec<Diagnostic> {
        let errors = self.errors();
        if errors.is_empty() {
            self.diagnostics.clone()
        } else {
            errors
        }
    }
}

/// Chat-completion model. Used for both the reasoner and the prover role.
#[async_trait]
pub trait ChatModel: Send + Sync {
    async fn complete(
        &self,
        meta: &RequestMeta,
        req: &CompletionRequest,
    ) -> BackendResult<Completion>;
}

#[async_trait]
pub trait Verifier: Send + Sync {
    async fn verify(
        &self,
        meta: &RequestMeta,
        source: &str,
        allow_sorry: bool,
    ) -> BackendResult<VerificationReport>;
}

#[async_trait]
pub trait Embedder: Send + Sync {
    /// Raw vectors, one per text, in input order.
    async fn embed(&self, meta: &RequestMeta, texts: &[String]) -> BackendResult<Vec<Vec<f32>>>;
}

/// L2-normalise each vector and check they share one dimension.
pub fn normalize_embeddings(
    vectors: Vec<Vec<f32>>,
    expected_dim: Option<usize>,
) -> BackendResult<Vec<Vec<f32>>> {
    let dim = expected_dim.or_else(|| vectors.first().map(Vec::len));
    vectors
        .into_iter()
        .map(|mut v| {
            if let Some(d) = dim {
                if v.len() != d {
                    return Err(BackendError::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    });
                }
            }
            let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(BackendError::ZeroVector);
            }
            for x in &mut v {
                *x = (f64::from(*x) / norm) as f32;
            }
            Ok(v)
        })
        .collect()
}

/// Run `op` under the retry policy. Only transport errors, 429 and 5xx are
/// retried; backoff doubles from the base and the total sleep is capped.
pub async fn with_retry<T, F, Fut>(policy: &RetryPolicy, mut op: F) -> BackendResult<T>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = BackendResult<T>>,
{
    let max = policy.max_attempts.max(1);
    let cap = Duration::from_millis(policy.max_total_backoff_ms);
    let mut slept = Duration::ZERO;
    let mut attempt = 1;
    loop {
        match op().await {
            Ok(v) => return Ok(v),
            Err(e) if !e.is_retryable() => return Err(e),
            Err(e) => {
                let want = policy.backoff(attempt);
                let remaining = cap.saturating_sub(slept);
                if attempt >= max || (remaining.is_zero() && !want.is_zero()) {
                    return Err(BackendError::Unavailable {
                        attempts: attempt,
                        last: e.to_string(),
                    });
                }
                let wait = want.min(remaining);
                tracing::warn!(attempt, error = %e, ?wait, "retrying backend request");
                tokio::time::sleep(wait).await;
                slept += wait;
                attempt += 1;
            }
        }
    }
}

/// The four role clients plus request defaults, shared by all runs.
#[derive(Clone)]
pub struct Backends {
    pub reasoner: Arc<dyn ChatModel>,
    pub prover: Arc<dyn ChatModel>,
    pub verifier: Arc<dyn Verifier>,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub retry: RetryPolicy,
    pub sampling: SamplingSettings,
}

impl Backends {
    /// HTTP clients from config, or mocks when `mock.script` is set.
    pub fn from_config(config: &Config) -> crate::Result<Self> {
        if let Some(script) = &config.mock.script {
            let mock = MockBackends::from_file(script)?;
            return Ok(mock.backends(config));
        }
        let b = &config.backends;
        let missing = |what: &str| {
            crate::Error::Config(crate::ConfigError::Validation(format!(
                "backends.{what}.url is required"
            )))
        };
        if b.reasoner.url.is_none() {
            return Err(missing("reasoner"));
        }
        if b.prover.url.is_none() {
            return Err(missing("prover"));
        }
        if b.verifier.url.is_none() {
            return Err(missing("verifier"));
        }
        let client = reqwest::Client::builder()
            .build()
            .map_err(|e| crate::Error::Other(format!("http client: {e}")))?;
        Ok(Self {
            reasoner: Arc::new(HttpChatModel::new(client.clone(), "reasoner", &b.reasoner)?),
            prover: Arc::new(HttpChatModel::new(client.clone(), "prover", &b.prover)?),
            verifier: Arc::new(HttpVerifier::new(client.clone(), &b.verifier)?),
            embedder: match b.embedder.url {
                Some(_) => Some(Arc::new(HttpEmbedder::new(client, &b.embedder)?) as Arc<dyn Embedder>),
                None => None,
            },
            retry: config.retry.clone(),
            sampling: config.sampling.clone(),
        })
    }

    pub fn session(&self, telemetry: Arc<RunTelemetry>) -> Session {
        Session {
            backends: self.clone(),
            telemetry,
        }
    }
}

/// Instrumented view of [`Backends`] for one run.
#[derive(Clone)]
pub struct Session {
    backends: Backends,
    telemetry: Arc<RunTelemetry>,
}

impl Session {
    pub fn telemetry(&self) -> &Arc<RunTelemetry> {
        &self.telemetry
    }

    pub fn has_embedder(&self) -> bool {
        self.backends.embedder.is_some()
    }

    /// One reasoner completion.
    pub async fn reason(&self, meta: &RequestMeta, prompt: &str) -> BackendResult<String> {
        self.telemetry.record_reasoner_call();
        self.telemetry.observe_depth(meta.depth);
        let s = &self.backends.sampling;
        let req = CompletionRequest {
            prompt: prompt.to_string(),
            temperature: s.reasoner_temperature,
            max_tokens: s.max_tokens,
            n_samples: 1,
        };
        let model = &self.backends.reasoner;
        let out = with_retry(&self.backends.retry, || model.complete(meta, &req)).await?;
        let (p, c) = usage_or_estimate(&req.prompt, &out);
        self.telemetry.record_reasoner_tokens(p, c);
        out.texts
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("reasoner returned no choices".into()))
    }

    /// A batch of `n` prover candidates from one request.
    pub async fn prove(&self, meta: &RequestMeta, prompt: &str, n: u32) -> BackendResult<Vec<String>> {
        self.telemetry.record_prover_batch(n);
        self.telemetry.observe_depth(meta.depth);
        let s = &self.backends.sampling;
        let req = CompletionRequest {
            prompt: prompt.to_string(),
            temperature: s.prover_temperature,
            max_tokens: s.max_tokens,
            n_samples: n,
        };
        let model = &self.backends.prover;
        let out = with_retry(&self.backends.retry, || model.complete(meta, &req)).await?;
        let (p, c) = usage_or_estimate(&req.prompt, &out);
        self.telemetry.record_prover_tokens(p, c);
        if out.texts.len() != n as usize {
            return Err(BackendError::Protocol(format!(
                "prover returned {} candidates, expected {n}",
                out.texts.len()
            )));
        }
        Ok(out.texts)
    }

    pub async fn verify(
        &self,
        meta: &RequestMeta,
        source: &str,
        allow_sorry: bool,
    ) -> BackendResult<VerificationReport> {
        self.telemetry.record_verifier_call();
        self.telemetry.observe_depth(meta.depth);
        let v = &self.backends.verifier;
        with_retry(&self.backends.retry, || v.verify(meta, source, allow_sorry)).await
    }

    /// Unit-normalised embeddings for `texts`.
    pub async fn embed(
        &self,
        meta: &RequestMeta,
        texts: &[String],
        expected_dim: Option<usize>,
    ) -> BackendResult<Vec<Vec<f32>>> {
        let Some(e) = &self.backends.embedder else {
            return Err(BackendError::InvalidRequest("no embedder configured".into()));
        };
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("nothing to embed".into()));
        }
        self.telemetry.record_embedder_call();
        self.telemetry.observe_depth(meta.depth);
        let raw = with_retry(&self.backends.retry, || e.embed(meta, texts)).await?;
        if raw.len() != texts.len() {
            return Err(BackendError::Protocol(format!(
                "embedder returned {} vectors for {} texts",
                raw.len(),
                texts.len()
            )));
        }
        normalize_embeddings(raw, expected_dim)
    }
}

fn usage_or_estimate(prompt: &str, out: &Completion) -> (u64, u64) {
    match out.usage {
        Some(u) => (u.prompt_tokens, u.completion_tokens),
        None => (
            estimate_tokens(prompt),
            out.texts.iter().map(|t| estimate_tokens(t)).sum(),
        ),
    }
}
