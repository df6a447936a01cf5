//! Deterministic scripted backends.
//!
//! A script is JSONL, one behaviour per line:
//!
//! ```text
//! {"stage":"sketch","problem":"p","attempt":1,"kind":"text","payload":"..."}
//! {"stage":"direct_proof","problem":"p","kind":"candidates","payload":["a","b","c","d"]}
//! {"kind":"verdict","payload":{"contains":"by trivial","accepted":true}}
//! {"kind":"embedding","payload":{"text":"query","vector":[1,0]}}
//! {"kind":"embedding","payload":{"hash_dim":64}}
//! {"stage":"sketch","problem":"p","attempt":1,"kind":"error","payload":{"status":503}}
//! ```
//!
//! Completions are keyed by `(stage, problem, attempt)` where `attempt` counts
//! invocations of that `(stage, problem)` pair from 1. Attempt 0 matches any
//! invocation and problem `*` matches any problem; exact keys win. Verdicts
//! match on source content, first rule in file order whose `contains` occurs
//! in the source. When two lines share a key the earlier one wins, so
//! overrides go before the lines they shadow. Anything unmatched is a
//! scripted-gap error.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    BackendResult, Backends, ChatModel, Completion, CompletionRequest, Embedder, RequestMeta,
    VerificationReport, Verifier,
};
use crate::config::Config;
use crate::error::BackendError;
use crate::textops::Diagnostic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    #[serde(default)]
    pub stage: String,
    #[serde(default)]
    pub problem: String,
    #[serde(default)]
    pub attempt: u32,
    pub kind: String,
    #[serde(default)]
    pub payload: serde_json::Value,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedBehavior {
    /// One text, repeated for every requested sample.
    Text(String),
    /// Exactly one text per requested sample.
    Texts(Vec<String>),
    /// HTTP-style failure; status 0 means a transport error.
    Error { status: u16, message: String },
}

#[derive(Debug, Clone)]
struct Entry {
    behavior: ScriptedBehavior,
    latency: Duration,
}

#[derive(Debug, Clone, Deserialize)]
struct VerdictRule {
    #[serde(default)]
    contains: String,
    accepted: bool,
    #[serde(default)]
    diagnostics: Vec<Diagnostic>,
    #[serde(skip)]
    latency: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Role {
    Reasoner,
    Prover,
}

/// Global invocation counts across every run sharing the mock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockCounters {
    pub reasoner_calls: u64,
    /// Candidates requested, summed over prover batches.
    pub prover_calls: u64,
    pub prover_requests: u64,
    pub verifier_calls: u64,
    pub embedder_calls: u64,
}

/// A request seen by the mock, for assertions on prompt content.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRequest {
    pub role: &'static str,
    pub stage: String,
    pub problem: String,
    pub attempt: u32,
    pub prompt: String,
}

#[derive(Default)]
struct Counters {
    reasoner_calls: AtomicU64,
    prover_calls: AtomicU64,
    prover_requests: AtomicU64,
    verifier_calls: AtomicU64,
    embedder_calls: AtomicU64,
}

struct Inner {
    completions: HashMap<(Role, String, String, u32), Entry>,
    verdicts: Vec<VerdictRule>,
    embeddings: HashMap<String, (Vec<f32>, Duration)>,
    hash_dim: Option<usize>,
    invocations: Mutex<HashMap<(Role, String, String), u32>>,
    counters: Counters,
    log: Mutex<Vec<LoggedRequest>>,
}

/// Scripted reasoner, prover, verifier and embedder sharing one script.
#[derive(Clone)]
pub struct MockBackends {
    inner: Arc<Inner>,
}

fn bad_line(n: usize, msg: impl std::fmt::Display) -> crate::Error {
    crate::Error::Other(format!("mock script line {n}: {msg}"))
}

impl MockBackends {
    pub fn from_file(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> crate::Result<Self> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let line: ScriptLine = serde_json::from_str(raw).map_err(|e| bad_line(i + 1, e))?;
            lines.push((i + 1, line));
        }
        Self::build(lines)
    }

    pub fn from_lines(lines: Vec<ScriptLine>) -> crate::Result<Self> {
        Self::build(lines.into_iter().enumerate().map(|(i, l)| (i + 1, l)).collect())
    }

    fn build(lines: Vec<(usize, ScriptLine)>) -> crate::Result<Self> {
        let mut inner = Inner {
            completions: HashMap::new(),
            verdicts: Vec::new(),
            embeddings: HashMap::new(),
            hash_dim: None,
            invocations: Mutex::new(HashMap::new()),
            counters: Counters::default(),
            log: Mutex::new(Vec::new()),
        };
        for (n, line) in lines {
            let latency = Duration::from_millis(line.latency_ms);
            let problem = if line.problem.is_empty() {
                "*".to_string()
            } else {
                line.problem.clone()
            };
            match line.kind.as_str() {
                "text" | "candidates" => {
                    let role = if line.kind == "text" {
                        Role::Reasoner
                    } else {
                        Role::Prover
                    };
                    let behavior = match &line.payload {
                        serde_json::Value::String(s) => ScriptedBehavior::Text(s.clone()),
                        serde_json::Value::Array(_) => ScriptedBehavior::Texts(
                            serde_json::from_value(line.payload.clone())
                                .map_err(|e| bad_line(n, e))?,
                        ),
                        _ => return Err(bad_line(n, "payload must be a string or an array")),
                    };
                    inner
                        .completions
                        .entry((role, line.stage.clone(), problem, line.attempt))
                        .or_insert(Entry { behavior, latency });
                }
                "error" => {
                    #[derive(Deserialize)]
                    struct E {
                        #[serde(default)]
                        status: u16,
                        #[serde(default)]
                        message: String,
                        #[serde(default)]
                        role: Option<String>,
                    }
                    let e: E = serde_json::from_value(line.payload.clone()).map_err(|e| bad_line(n, e))?;
                    let behavior = ScriptedBehavior::Error {
                        status: e.status,
                        message: e.message,
                    };
                    let roles: &[Role] = match e.role.as_deref() {
                        Some("reasoner") => &[Role::Reasoner],
                        Some("prover") => &[Role::Prover],
                        _ => &[Role::Reasoner, Role::Prover],
                    };
                    for role in roles {
                        inner
                            .completions
                            .entry((*role, line.stage.clone(), problem.clone(), line.attempt))
                            .or_insert(Entry {
                                behavior: behavior.clone(),
                                latency,
                            });
                    }
                }
                "verdict" => {
                    let mut rule: VerdictRule =
                        serde_json::from_value(line.payload.clone()).map_err(|e| bad_line(n, e))?;
                    rule.latency = latency;
                    inner.verdicts.push(rule);
                }
                "embedding" => {
                    #[derive(Deserialize)]
                    struct Emb {
                        text: Option<String>,
                        vector: Option<Vec<f32>>,
                        hash_dim: Option<usize>,
                    }
                    let e: Emb = serde_json::from_value(line.payload.clone()).map_err(|e| bad_line(n, e))?;
                    match (e.text, e.vector, e.hash_dim) {
                        (Some(t), Some(v), _) => {
                            inner.embeddings.entry(t).or_insert((v, latency));
                        }
                        (None, None, Some(d)) if d > 0 => inner.hash_dim = Some(d),
                        _ => return Err(bad_line(n, "embedding needs text+vector or hash_dim")),
                    }
                }
                other => return Err(bad_line(n, format!("unknown kind {other:?}"))),
            }
        }
        Ok(Self {
            inner: Arc::new(inner),
        })
    }

    pub fn counters(&self) -> MockCounters {
        let c = &self.inner.counters;
        let get = |a: &AtomicU64| a.load(Ordering::SeqCst);
        MockCounters {
            reasoner_calls: get(&c.reasoner_calls),
            prover_calls: get(&c.prover_calls),
            prover_requests: get(&c.prover_requests),
            verifier_calls: get(&c.verifier_calls),
            embedder_calls: get(&c.embedder_calls),
        }
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.inner.log.lock().expect("mock log poisoned").clone()
    }

    pub fn has_embedder(&self) -> bool {
        self.inner.hash_dim.is_some() || !self.inner.embeddings.is_empty()
    }

    /// Backends that route every role to this mock.
    pub fn backends(&self, config: &Config) -> Backends {
        Backends {
            reasoner: Arc::new(MockRole {
                mock: self.clone(),
                role: Role::Reasoner,
            }),
            prover: Arc::new(MockRole {
                mock: self.clone(),
                role: Role::Prover,
            }),
            verifier: Arc::new(self.clone()),
            embedder: self
                .has_embedder()
                .then(|| Arc::new(self.clone()) as Arc<dyn Embedder>),
            retry: config.retry.clone(),
            sampling: config.sampling.clone(),
        }
    }

    pub(crate) async fn complete_as(
        &self,
        role: Role,
        meta: &RequestMeta,
        req: &CompletionRequest,
    ) -> BackendResult<Completion> {
        let c = &self.inner.counters;
        match role {
            Role::Reasoner => {
                c.reasoner_calls.fetch_add(1, Ordering::SeqCst);
            }
            Role::Prover => {
                c.prover_calls
                    .fetch_add(u64::from(req.n_samples), Ordering::SeqCst);
                c.prover_requests.fetch_add(1, Ordering::SeqCst);
            }
        }
        let attempt = {
            let mut inv = self.inner.invocations.lock().expect("mock counter poisoned");
            let slot = inv
                .entry((role, meta.stage.clone(), meta.problem.clone()))
                .or_insert(0);
            *slot += 1;
            *slot
        };
        self.inner.log.lock().expect("mock log poisoned").push(LoggedRequest {
            role: match role {
                Role::Reasoner => "reasoner",
                Role::Prover => "prover",
            },
            stage: meta.stage.clone(),
            problem: meta.problem.clone(),
            attempt,
            prompt: req.prompt.clone(),
        });
        let lookup = |p: &str, a: u32| {
            self.inner
                .completions
                .get(&(role, meta.stage.clone(), p.to_string(), a))
        };
        let entry = lookup(&meta.problem, attempt)
            .or_else(|| lookup(&meta.problem, 0))
            .or_else(|| lookup("*", attempt))
            .or_else(|| lookup("*", 0))
            .cloned()
            .ok_or_else(|| BackendError::ScriptedGap {
                stage: meta.stage.clone(),
                problem: meta.problem.clone(),
                attempt,
            })?;
        if !entry.latency.is_zero() {
            tokio::time::sleep(entry.latency).await;
        }
        let n = req.n_samples as usize;
        let texts = match entry.behavior {
            ScriptedBehavior::Text(t) => vec![t; n],
            ScriptedBehavior::Texts(ts) if ts.len() == n => ts,
            ScriptedBehavior::Texts(ts) => {
                return Err(BackendError::Protocol(format!(
                    "script for stage={} problem={} has {} texts, request wants {n}",
                    meta.stage,
                    meta.problem,
                    ts.len()
                )))
            }
            ScriptedBehavior::Error { status, message } => {
                return Err(match status {
                    0 => BackendError::Transport(message),
                    429 => BackendError::RateLimited(message),
                    s if s >= 500 => BackendError::Server { status: s, body: message },
                    _ => BackendError::InvalidRequest(message),
                })
            }
        };
        Ok(Completion { texts, usage: None })
    }

    pub(crate) async fn verify_source(
        &self,
        meta: &RequestMeta,
        source: &str,
        allow_sorry: bool,
    ) -> BackendResult<VerificationReport> {
        self.inner.counters.verifier_calls.fetch_add(1, Ordering::SeqCst);
        let rule = self
            .inner
            .verdicts
            .iter()
            .find(|r| source.contains(r.contains.as_str()))
            .cloned()
            .ok_or_else(|| BackendError::ScriptedGap {
                stage: meta.stage.clone(),
                problem: meta.problem.clone(),
                attempt: 0,
            })?;
        if !rule.latency.is_zero() {
            tokio::time::sleep(rule.latency).await;
        }
        Ok(VerificationReport::from_raw(
            source,
            rule.accepted,
            rule.diagnostics,
            false,
            allow_sorry,
            rule.latency,
        ))
    }

    pub(crate) async fn embed_texts(
        &self,
        meta: &RequestMeta,
        texts: &[String],
    ) -> BackendResult<Vec<Vec<f32>>> {
        self.inner.counters.embedder_calls.fetch_add(1, Ordering::SeqCst);
        let mut out = Vec::with_capacity(texts.len());
        let mut latency = Duration::ZERO;
        for t in texts {
            if let Some((v, l)) = self.inner.embeddings.get(t) {
                latency = latency.max(*l);
                out.push(v.clone());
            } else if let Some(dim) = self.inner.hash_dim {
                out.push(hash_embedding(t, dim));
            } else {
                return Err(BackendError::ScriptedGap {
                    stage: meta.stage.clone(),
                    problem: format!("{} (text {t:?})", meta.problem),
                    attempt: 0,
                });
            }
        }
        if !latency.is_zero() {
            tokio::time::sleep(latency).await;
        }
        Ok(out)
    }
}

struct MockRole {
    mock: MockBackends,
    role: Role,
}

#[async_trait]
impl ChatModel for MockRole {
    async fn complete(&self, meta: &RequestMeta, req: &CompletionRequest) -> BackendResult<Completion> {
        self.mock.complete_as(self.role, meta, req).await
    }
}

#[async_trait]
impl Verifier for MockBackends {
    async fn verify(
        &self,
        meta: &RequestMeta,
        source: &str,
        allow_sorry: bool,
    ) -> BackendResult<VerificationReport> {
        self.verify_source(meta, source, allow_sorry).await
    }
}

#[async_trait]
impl Embedder for MockBackends {
    async fn embed(&self, meta: &RequestMeta, texts: &[String]) -> BackendResult<Vec<Vec<f32>>> {
        self.embed_texts(meta, texts).await
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Programmatic construction of mock scripts.
#[derive(Debug, Clone, Default)]
pub struct ScriptBuilder {
    lines: Vec<ScriptLine>,
}

impl ScriptBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(mut self, stage: &str, problem: &str, attempt: u32, kind: &str, payload: serde_json::Value) -> Self {
        self.lines.push(ScriptLine {
            stage: stage.to_string(),
            problem: problem.to_string(),
            attempt,
            kind: kind.to_string(),
            payload,
            latency_ms: 0,
        });
        self
    }

    /// A reasoner reply. `attempt` 0 answers every invocation.
    pub fn reasoner(self, stage: &str, problem: &str, attempt: u32, text: impl Into<String>) -> Self {
        self.push(stage, problem, attempt, "text", serde_json::Value::String(text.into()))
    }

    /// A prover batch, one text per requested candidate.
    pub fn prover<S: Into<String>>(
        self,
        stage: &str,
        problem: &str,
        attempt: u32,
        candidates: impl IntoIterator<Item = S>,
    ) -> Self {
        let c: Vec<serde_json::Value> = candidates
            .into_iter()
            .map(|s| serde_json::Value::String(s.into()))
            .collect();
        self.push(stage, problem, attempt, "candidates", serde_json::Value::Array(c))
    }

    /// Verifier rule: sources containing `contains` get this verdict.
    pub fn verdict(self, contains: &str, accepted: bool, diagnostics: &[Diagnostic]) -> Self {
        let payload = serde_json::json!({
            "contains": contains,
            "accepted": accepted,
            "diagnostics": diagnostics,
        });
        self.push("", "", 0, "verdict", payload)
    }

    pub fn error(self, stage: &str, problem: &str, attempt: u32, status: u16, message: &str) -> Self {
        let payload = serde_json::json!({"status": status, "message": message});
        self.push(stage, problem, attempt, "error", payload)
    }

    pub fn hash_embeddings(self, dim: usize) -> Self {
        self.push("", "", 0, "embedding", serde_json::json!({ "hash_dim": dim }))
    }

    pub fn embedding(self, text: &str, vector: &[f32]) -> Self {
        self.push("", "", 0, "embedding", serde_json::json!({"text": text, "vector": vector}))
    }

    /// Delay applied to the most recently added line.
    pub fn latency(mut self, ms: u64) -> Self {
        if let Some(l) = self.lines.last_mut() {
            l.latency_ms = ms;
        }
        self
    }

    pub fn extend(mut self, other: ScriptBuilder) -> Self {
        self.lines.extend(other.lines);
        self
    }

    pub fn lines(&self) -> &[ScriptLine] {
        &self.lines
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&serde_json::to_string(l).expect("script lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn build(&self) -> crate::Result<MockBackends> {
        MockBackends::from_lines(self.lines.clone())
    }
}

/// Signed feature hashing of lowercase word tokens. Deterministic and never
/// all-zero; good enough for routing tests, not for real retrieval.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0f32; dim.max(1)];
    for tok in text
        .split(|c: char| !c.is_alphanumeric() && c != '_' && c != '.')
        .filter(|t| !t.is_empty())
    {
        let h = fnv1a(tok.to_lowercase().as_bytes());
        let idx = (h % v.len() as u64) as usize;
        v[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    if v.iter().all(|x| *x == 0.0) {
        v[0] = 1.0;
    }
    v
}
