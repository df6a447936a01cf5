//! Run configuration: budgets, backend endpoints, retrieval and prompt settings.
//!
//! The on-disk format is TOML. Every field is optional; omitted budget values
//! fall back to [`RunBudget::default`]. Counts are parsed as signed integers so
//! that a negative value is reported as a validation error instead of a parse
//! error. API keys are never read from the file, only from the environment.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

pub const REASONER_KEY_ENV: &str = "HILBERT_REASONER_API_KEY";
pub const PROVER_KEY_ENV: &str = "HILBERT_PROVER_API_KEY";
pub const EMBEDDER_KEY_ENV: &str = "HILBERT_EMBEDDER_API_KEY";

/// Attempt caps and depth bound for one run. Shared read-only by all jobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunBudget {
    pub k_initial_proof: u32,
    pub s_queries: u32,
    pub m_results: u32,
    pub k_sketch_attempts: u32,
    pub k_formal_proof: u32,
    pub k_proof_correction: u32,
    pub k_informal_passes: u32,
    pub k_max_shallow_len: u32,
    pub max_depth: u32,
    pub k_sketch_corrections: u32,
    pub k_theorem_corrections: u32,
    pub k_subgoal_corrections: u32,
    pub k_subgoal_error_corrections: u32,
    pub max_concurrency: u32,
}

impl Default for RunBudget {
    fn default() -> Self {
        Self {
            k_initial_proof: 4,
            s_queries: 5,
            m_results: 5,
            k_sketch_attempts: 4,
            k_formal_proof: 4,
            k_proof_correction: 6,
            k_informal_passes: 6,
            k_max_shallow_len: 30,
            max_depth: 5,
            k_sketch_corrections: 3,
            k_theorem_corrections: 3,
            k_subgoal_corrections: 3,
            k_subgoal_error_corrections: 3,
            max_concurrency: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub url: Option<String>,
    pub model: Option<String>,
    #[serde(skip)]
    pub api_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierEndpoint {
    pub url: Option<String>,
    pub timeout_s: u64,
}

impl Default for VerifierEndpoint {
    fn default() -> Self {
        Self {
            url: None,
            timeout_s: 180,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendSettings {
    pub reasoner: ModelEndpoint,
    pub prover: ModelEndpoint,
    pub verifier: VerifierEndpoint,
    pub embedder: ModelEndpoint,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub enabled: bool,
    pub index_path: Option<PathBuf>,
}

/// Retry policy for HTTP backends: transport errors, 5xx and 429 only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_total_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 1000,
            max_total_backoff_ms: 60_000,
        }
    }
}

impl RetryPolicy {
    /// Backoff before retry number `retry` (1-based): base * 2^(retry-1).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64 << (retry.saturating_sub(1)).min(20);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSettings {
    pub reasoner_temperature: f64,
    pub prover_temperature: f64,
    pub max_tokens: u32,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self {
            reasoner_temperature: 0.3,
            prover_temperature: 1.0,
            max_tokens: 16_384,
        }
    }
}

/// Free-text hint blocks substituted into the prompt templates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub lean_hints: String,
    pub tactic_hints: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    /// JSONL script for the in-process mock backends. When set, no endpoint is required.
    pub script: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub budget: RunBudget,
    pub backends: BackendSettings,
    pub retrieval: RetrievalSettings,
    pub retry: RetryPolicy,
    pub sampling: SamplingSettings,
    pub prompts: PromptSettings,
    pub mock: MockSettings,
}

impl Config {
    pub fn mocks_enabled(&self) -> bool {
        self.mock.script.is_some()
    }

    /// Render back to TOML. Reparsing the output yields an identical config (keys excluded).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Check that every endpoint needed by this run is configured and well formed.
    pub fn validate_endpoints(&self) -> Result<(), ConfigError> {
        let b = &self.backends;
        for (name, url) in [
            ("backends.reasoner.url", &b.reasoner.url),
            ("backends.prover.url", &b.prover.url),
            ("backends.verifier.url", &b.verifier.url),
            ("backends.embedder.url", &b.embedder.url),
        ] {
            if let Some(u) = url {
                check_url(name, u)?;
            }
        }
        if self.retrieval.enabled && self.retrieval.index_path.is_none() {
            return Err(ConfigError::Validation(
                "retrieval.enabled requires retrieval.index_path".into(),
            ));
        }
        if self.mocks_enabled() {
            return Ok(());
        }
        let mut missing = Vec::new();
        if b.reasoner.url.is_none() {
            missing.push("backends.reasoner.url");
        }
        if b.prover.url.is_none() {
            missing.push("backends.prover.url");
        }
        if b.verifier.url.is_none() {
            missing.push("backends.verifier.url");
        }
        if self.retrieval.enabled && b.embedder.url.is_none() {
            missing.push("backends.embedder.url");
        }
        if !missing.is_empty() {
            return Err(ConfigError::Validation(format!(
                "missing endpoint(s) with mocks disabled: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Fill API keys from the environment. Only secrets are overridable this way.
    pub fn apply_env(&mut self) {
        self.apply_env_from(|k| std::env::var(k).ok());
    }

    pub fn apply_env_from(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        self.backends.reasoner.api_key = lookup(REASONER_KEY_ENV);
        self.backends.prover.api_key = lookup(PROVER_KEY_ENV);
        self.backends.embedder.api_key = lookup(EMBEDDER_KEY_ENV);
    }
}

fn check_url(key: &str, raw: &str) -> Result<(), ConfigError> {
    let parsed = url::Url::parse(raw)
        .map_err(|e| ConfigError::Validation(format!("{key}: invalid URL {raw:?}: {e}")))?;
    match parsed.scheme() {
        "http" | "https" => Ok(()),
        other => Err(ConfigError::Validation(format!(
            "{key}: unsupported scheme {other:?}"
        ))),
    }
}

// Signed mirror of the file format; converted after range checks.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawBudget {
    k_initial_proof: Option<i64>,
    s_queries: Option<i64>,
    m_results: Option<i64>,
    k_sketch_attempts: Option<i64>,
    k_formal_proof: Option<i64>,
    k_proof_correction: Option<i64>,
    k_informal_passes: Option<i64>,
    k_max_shallow_len: Option<i64>,
    max_depth: Option<i64>,
    k_sketch_corrections: Option<i64>,
    k_theorem_corrections: Option<i64>,
    k_subgoal_corrections: Option<i64>,
    k_subgoal_error_corrections: Option<i64>,
    max_concurrency: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawModelEndpoint {
    url: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawVerifierEndpoint {
    url: Option<String>,
    timeout_s: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawBackends {
    reasoner: RawModelEndpoint,
    prover: RawModelEndpoint,
    verifier: RawVerifierEndpoint,
    embedder: RawModelEndpoint,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawRetry {
    max_attempts: Option<i64>,
    base_backoff_ms: Option<i64>,
    max_total_backoff_ms: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawSampling {
    reasoner_temperature: Option<f64>,
    prover_temperature: Option<f64>,
    max_tokens: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    budget: RawBudget,
    backends: RawBackends,
    retrieval: RetrievalSettings,
    retry: RawRetry,
    sampling: RawSampling,
    prompts: PromptSettings,
    mock: MockSettings,
}

fn count(key: &str, value: Option<i64>, default: u32, min: i64) -> Result<u32, ConfigError> {
    match value {
        None => Ok(default),
        Some(v) if v < min => Err(ConfigError::Validation(format!(
            "{key} must be >= {min}, got {v}"
        ))),
        Some(v) => u32::try_from(v)
            .map_err(|_| ConfigError::Validation(format!("{key} out of range: {v}"))),
    }
}

fn wide(key: &str, value: Option<i64>, default: u64, min: i64) -> Result<u64, ConfigError> {
    match value {
        None => Ok(default),
        Some(v) if v < min => Err(ConfigError::Validation(format!(
            "{key} must be >= {min}, got {v}"
        ))),
        Some(v) => Ok(v as u64),
    }
}

impl RawBudget {
    fn into_budget(self) -> Result<RunBudget, ConfigError> {
        let d = RunBudget::default();
        Ok(RunBudget {
            k_initial_proof: count("budget.k_initial_proof", self.k_initial_proof, d.k_initial_proof, 0)?,
            s_queries: count("budget.s_queries", self.s_queries, d.s_queries, 0)?,
            m_results: count("budget.m_results", self.m_results, d.m_results, 0)?,
            k_sketch_attempts: count("budget.k_sketch_attempts", self.k_sketch_attempts, d.k_sketch_attempts, 0)?,
            k_formal_proof: count("budget.k_formal_proof", self.k_formal_proof, d.k_formal_proof, 0)?,
            k_proof_correction: count("budget.k_proof_correction", self.k_proof_correction, d.k_proof_correction, 0)?,
            k_informal_passes: count("budget.k_informal_passes", self.k_informal_passes, d.k_informal_passes, 0)?,
            k_max_shallow_len: count("budget.k_max_shallow_len", self.k_max_shallow_len, d.k_max_shallow_len, 0)?,
            max_depth: count("budget.max_depth", self.max_depth, d.max_depth, 0)?,
            k_sketch_corrections: count("budget.k_sketch_corrections", self.k_sketch_corrections, d.k_sketch_corrections, 0)?,
            k_theorem_corrections: count("budget.k_theorem_corrections", self.k_theorem_corrections, d.k_theorem_corrections, 0)?,
            k_subgoal_corrections: count("budget.k_subgoal_corrections", self.k_subgoal_corrections, d.k_subgoal_corrections, 0)?,
            k_subgoal_error_corrections: count(
                "budget.k_subgoal_error_corrections",
                self.k_subgoal_error_corrections,
                d.k_subgoal_error_corrections,
                0,
            )?,
            max_concurrency: count("budget.max_concurrency", self.max_concurrency, d.max_concurrency, 1)?,
        })
    }
}

impl RawConfig {
    fn into_config(self) -> Result<Config, ConfigError> {
        let budget = self.budget.into_budget()?;
        let endpoint = |r: RawModelEndpoint| ModelEndpoint {
            url: r.url,
            model: r.model,
            api_key: None,
        };
        let vd = VerifierEndpoint::default();
        let backends = BackendSettings {
            reasoner: endpoint(self.backends.reasoner),
            prover: endpoint(self.backends.prover),
            verifier: VerifierEndpoint {
                url: self.backends.verifier.url,
                timeout_s: wide("backends.verifier.timeout_s", self.backends.verifier.timeout_s, vd.timeout_s, 1)?,
            },
            embedder: endpoint(self.backends.embedder),
        };
        let rd = RetryPolicy::default();
        let retry = RetryPolicy {
            max_attempts: count("retry.max_attempts", self.retry.max_attempts, rd.max_attempts, 1)?,
            base_backoff_ms: wide("retry.base_backoff_ms", self.retry.base_backoff_ms, rd.base_backoff_ms, 0)?,
            max_total_backoff_ms: wide(
                "retry.max_total_backoff_ms",
                self.retry.max_total_backoff_ms,
                rd.max_total_backoff_ms,
                0,
            )?,
        };
        let sd = SamplingSettings::default();
        let sampling = SamplingSettings {
            reasoner_temperature: self.sampling.reasoner_temperature.unwrap_or(sd.reasoner_temperature),
            prover_temperature: self.sampling.prover_temperature.unwrap_or(sd.prover_temperature),
            max_tokens: count("sampling.max_tokens", self.sampling.max_tokens, sd.max_tokens, 1)?,
        };
        for (k, t) in [
            ("sampling.reasoner_temperature", sampling.reasoner_temperature),
            ("sampling.prover_temperature", sampling.prover_temperature),
        ] {
            if !(t.is_finite() && t >= 0.0) {
                return Err(ConfigError::Validation(format!("{k} must be a finite value >= 0")));
            }
        }
        Ok(Config {
            budget,
            backends,
            retrieval: self.retrieval,
            retry,
            sampling,
            prompts: self.prompts,
            mock: self.mock,
        })
    }
}

/// Parse a config from TOML text. Does not consult the environment.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let config = raw.into_config()?;
    config.validate_endpoints()?;
    Ok(config)
}

/// Load, validate and apply environment secrets.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = parse_config(&text)?;
    // Relative paths in the file are relative to the file itself.
    if let Some(dir) = path.parent() {
        if let Some(p) = config.retrieval.index_path.as_mut() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(p) = config.mock.script.as_mut() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
    config.apply_env();
    Ok(config)
}
