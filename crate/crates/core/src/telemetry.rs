//! Per-run counters and the structured event trace.

use std::io::Write;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Proved,
    Failed,
    BudgetExhausted,
    Error,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Proved => "proved",
            Outcome::Failed => "failed",
            Outcome::BudgetExhausted => "budget-exhausted",
            Outcome::Error => "error",
        }
    }
}

/// Live counters for one problem. Shared by every job working on it.
#[derive(Debug, Default)]
pub struct RunTelemetry {
    reasoner_calls: AtomicU64,
    prover_calls: AtomicU64,
    prover_requests: AtomicU64,
    verifier_calls: AtomicU64,
    embedder_calls: AtomicU64,
    reasoner_prompt_tokens: AtomicU64,
    reasoner_completion_tokens: AtomicU64,
    prover_prompt_tokens: AtomicU64,
    prover_completion_tokens: AtomicU64,
    max_depth_reached: AtomicU32,
}

impl RunTelemetry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn record_reasoner_call(&self) {
        self.reasoner_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_reasoner_tokens(&self, prompt: u64, completion: u64) {
        self.reasoner_prompt_tokens.fetch_add(prompt, Ordering::Relaxed);
        self.reasoner_completion_tokens
            .fetch_add(completion, Ordering::Relaxed);
    }

    /// One batch request of `n` candidates counts as `n` prover calls.
    pub fn record_prover_batch(&self, n: u32) {
        self.prover_calls.fetch_add(u64::from(n), Ordering::Relaxed);
        self.prover_requests.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_prover_tokens(&self, prompt: u64, completion: u64) {
        self.prover_prompt_tokens.fetch_add(prompt, Ordering::Relaxed);
        self.prover_completion_tokens
            .fetch_add(completion, Ordering::Relaxed);
    }

    pub fn record_verifier_call(&self) {
        self.verifier_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_embedder_call(&self) {
        self.embedder_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn observe_depth(&self, depth: u32) {
        self.max_depth_reached.fetch_max(depth, Ordering::Relaxed);
    }

    pub fn snapshot(
        &self,
        wall_time: Duration,
        outcome: Outcome,
        proof_line_count: Option<usize>,
    ) -> TelemetrySnapshot {
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        TelemetrySnapshot {
            reasoner_calls: get(&self.reasoner_calls),
            prover_calls: get(&self.prover_calls),
            prover_requests: get(&self.prover_requests),
            verifier_calls: get(&self.verifier_calls),
            embedder_calls: get(&self.embedder_calls),
            reasoner_prompt_tokens: get(&self.reasoner_prompt_tokens),
            reasoner_completion_tokens: get(&self.reasoner_completion_tokens),
            prover_prompt_tokens: get(&self.prover_prompt_tokens),
            prover_completion_tokens: get(&self.prover_completion_tokens),
            wall_time_ms: wall_time.as_millis() as u64,
            max_depth_reached: self.max_depth_reached.load(Ordering::Relaxed),
            outcome,
            proof_line_count: if outcome == Outcome::Proved {
                proof_line_count
            } else {
                None
            },
        }
    }
}

/// Frozen counters as stored in run records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub reasoner_calls: u64,
    pub prover_calls: u64,
    #[serde(default)]
    pub prover_requests: u64,
    pub verifier_calls: u64,
    pub embedder_calls: u64,
    pub reasoner_prompt_tokens: u64,
    pub reasoner_completion_tokens: u64,
    pub prover_prompt_tokens: u64,
    pub prover_completion_tokens: u64,
    pub wall_time_ms: u64,
    pub max_depth_reached: u32,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proof_line_count: Option<usize>,
}

impl TelemetrySnapshot {
    pub fn reasoner_tokens(&self) -> u64 {
        self.reasoner_prompt_tokens + self.reasoner_completion_tokens
    }

    pub fn prover_tokens(&self) -> u64 {
        self.prover_prompt_tokens + self.prover_completion_tokens
    }

    pub fn total_tokens(&self) -> u64 {
        self.reasoner_tokens() + self.prover_tokens()
    }

    /// Reasoner plus prover calls, the x-axis of the total-calls curve.
    pub fn total_calls(&self) -> u64 {
        self.reasoner_calls + self.prover_calls
    }
}

/// Token estimate used when a backend reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Milliseconds since the start of the run.
    pub ts: u64,
    pub depth: u32,
    pub stage: String,
    pub attempt: u32,
    pub backend: String,
    pub event: String,
    pub detail: String,
}

impl TraceEvent {
    pub fn is_verifier(&self) -> bool {
        self.backend == "verifier"
    }

    /// A verifier acceptance of a complete proof (sorry not allowed).
    pub fn is_complete_acceptance(&self) -> bool {
        self.is_verifier() && self.event == "accepted" && self.detail.starts_with("allow_sorry=false")
    }
}

/// Ordered event buffer. Jobs running concurrently record into children that
/// the owner absorbs in completion order, so the merged log never interleaves
/// events of jobs whose results were discarded.
#[derive(Debug, Clone)]
pub struct Trace {
    origin: Instant,
    events: Vec<TraceEvent>,
}

impl Default for Trace {
    fn default() -> Self {
        Self::new()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            events: Vec::new(),
        }
    }

    pub fn child(&self) -> Self {
        Self {
            origin: self.origin,
            events: Vec::new(),
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.origin.elapsed()
    }

    pub fn push(
        &mut self,
        depth: u32,
        stage: &str,
        attempt: u32,
        backend: &str,
        event: &str,
        detail: impl Into<String>,
    ) {
        self.events.push(TraceEvent {
            ts: self.origin.elapsed().as_millis() as u64,
            depth,
            stage: stage.to_string(),
            attempt,
            backend: backend.to_string(),
            event: event.to_string(),
            detail: detail.into(),
        });
    }

    pub fn absorb(&mut self, other: Trace) {
        self.events.extend(other.events);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }
}

pub fn write_trace_jsonl(events: &[TraceEvent], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
