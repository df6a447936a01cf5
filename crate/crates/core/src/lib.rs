//! Recursive subgoal-decomposition orchestration for Lean 4 theorem proving.
//!
//! A problem is first attacked directly by a prover model. When that fails, a
//! reasoner model writes an informal proof, turns it into a Lean sketch whose
//! intermediate steps are `have` statements closed by `sorry`, lifts those steps
//! into standalone subgoal theorems, and reassembles the main proof on top of
//! them. Each subgoal is then proved by the prover, by a short reasoner-written
//! proof, or by recursing into the same decomposition, and the verified pieces
//! are concatenated into one Lean file.
//!
//! The crate is organised by role:
//!
//! * [`config`], [`problem`], [`telemetry`]: shared domain types, budgets, counters.
//! * [`textops`]: lexical processing of model responses and Lean source.
//! * [`prompts`]: the fixed prompt templates and their renderer.
//! * [`backends`]: reasoner / prover / verifier / embedder clients and mocks.
//! * [`retrieval`]: embedding index and theorem retrieval.
//! * [`jobpool`]: bounded-concurrency job execution with three completion modes.
//! * [`pipeline`]: the decomposition engine itself.
//! * [`harness`]: datasets, benchmark runs, resumption and reports.

pub mod backends;
pub mod config;
pub mod error;
pub mod harness;
pub mod jobpool;
pub mod pipeline;
pub mod problem;
pub mod prompts;
pub mod retrieval;
pub mod telemetry;
pub mod textops;

pub use config::{BackendSettings, Config, RunBudget};
pub use error::{BackendError, ConfigError, Error, Result};
pub use pipeline::Engine;
pub use problem::{Origin, ProblemStatement, ProofResult, ProofStatus};
pub use telemetry::{Outcome, RunTelemetry, TelemetrySnapshot, Trace, TraceEvent};
