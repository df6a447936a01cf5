//! The decomposition engine.
//!
//! [`Engine::generate_proof`] races prover candidates against the verifier,
//! and when none is accepted falls back to recursive decomposition: informal
//! proof, Lean sketch with sorried `have` subgoals, extraction of those
//! subgoals as standalone theorems, assembly of the main proof on top of them,
//! validation, and finally solving every subgoal by prover, short reasoner
//! proof or further decomposition.
//!
//! Every step that fails for ordinary reasons (rejected candidate, exhausted
//! correction budget) yields `Ok(None)`. Backend errors propagate as `Err` and
//! end the run with outcome `error`.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use futures::future::BoxFuture;
use futures::FutureExt;
use tokio::time::Instant;

use crate::backends::{Backends, RequestMeta, Session, VerificationReport};
use crate::config::{Config, RunBudget};
use crate::error::BackendError;
use crate::jobpool::{self, Job, Mode};
use crate::problem::{join_source, ProblemStatement, ProofResult, ProofStatus};
use crate::prompts::Template;
use crate::retrieval::{self, EmbeddingIndex, TheoremRecord};
use crate::telemetry::{Outcome, RunTelemetry, Trace};
use crate::textops::{self, Diagnostic, SketchAnalysis, TextError};

type Step<T> = Result<Option<T>, BackendError>;

/// A sorried `have` of a sketch, lifted into its own theorem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgoal {
    pub name: String,
    /// Earlier subgoals this statement refers to, if any.
    pub context_note: String,
    pub problem: ProblemStatement,
}

impl Subgoal {
    pub fn statement(&self) -> &str {
        &self.problem.statement
    }
}

/// What a decomposition node knows once its sketch has been validated.
#[derive(Debug, Clone)]
pub struct DecompositionState {
    pub problem: ProblemStatement,
    pub depth: u32,
    pub sketch: Option<String>,
    pub subgoals: Vec<Subgoal>,
    /// Subgoal name to complete proof source.
    pub proved: BTreeMap<String, String>,
    pub assembled_main: Option<String>,
    pub relevant_theorems: Vec<TheoremRecord>,
}

enum Validation {
    Valid(BTreeMap<String, String>),
    Invalid(String),
}

enum Rejection {
    Wrong(String),
    Backend(BackendError),
}

impl From<BackendError> for Rejection {
    fn from(e: BackendError) -> Self {
        Rejection::Backend(e)
    }
}

pub struct Engine {
    config: Config,
    backends: Backends,
    index: Option<Arc<EmbeddingIndex>>,
}

impl Engine {
    pub fn new(config: Config, backends: Backends, index: Option<EmbeddingIndex>) -> Self {
        Self {
            config,
            backends,
            index: index.map(Arc::new),
        }
    }

    /// Build backends from `config` and load the retrieval index if enabled.
    pub fn from_config(config: Config) -> crate::Result<Self> {
        let backends = Backends::from_config(&config)?;
        let index = if config.retrieval.enabled {
            let path = config.retrieval.index_path.as_ref().ok_or_else(|| {
                crate::Error::Config(crate::ConfigError::Validation(
                    "retrieval.index_path is required when retrieval is enabled".into(),
                ))
            })?;
            Some(EmbeddingIndex::load(path)?)
        } else {
            None
        };
        Ok(Self::new(config, backends, index))
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub async fn generate_proof(&self, problem: &ProblemStatement) -> ProofResult {
        self.generate_proof_within(problem, None).await
    }

    /// As [`Engine::generate_proof`], abandoning the run after `limit`
    /// with outcome `budget-exhausted`.
    pub async fn generate_proof_within(
        &self,
        problem: &ProblemStatement,
        limit: Option<Duration>,
    ) -> ProofResult {
        let telemetry = RunTelemetry::new();
        let run = Run {
            budget: &self.config.budget,
            engine: self,
            session: self.backends.session(telemetry.clone()),
        };
        let start = Instant::now();
        let mut trace = Trace::new();
        let work = run.prove(problem, &mut trace);
        let finished = match limit {
            Some(d) => tokio::time::timeout(d, work).await.ok(),
            None => Some(work.await),
        };
        let (status, outcome, source, error) = match finished {
            Some(Ok(Some(src))) => (ProofStatus::Proved, Outcome::Proved, Some(src), None),
            Some(Ok(None)) => (ProofStatus::Failed, Outcome::Failed, None, None),
            Some(Err(e)) => {
                tracing::warn!(problem = %problem.name, error = %e, "run aborted by backend error");
                trace.push(0, "run", 0, "engine", "error", e.to_string());
                (ProofStatus::Failed, Outcome::Error, None, Some(e.to_string()))
            }
            None => {
                trace.push(0, "run", 0, "engine", "timeout", "");
                (ProofStatus::Failed, Outcome::BudgetExhausted, None, None)
            }
        };
        let lines = source.as_deref().map(textops::count_file_lines);
        ProofResult {
            problem_name: problem.name.clone(),
            status,
            proof_source: source,
            telemetry: telemetry.snapshot(start.elapsed(), outcome, lines),
            error,
            trace: trace.into_events(),
        }
    }
}

/// The prover's input: the problem as a Lean file to complete.
pub fn prover_prompt(problem: &ProblemStatement) -> String {
    format!(
        "Complete the following Lean 4 code:\n\n```lean4\n{}```",
        problem.full_source()
    )
}

/// Header line plus listing, or nothing when there are no theorems.
pub fn useful_theorems_section(theorems: &[TheoremRecord]) -> String {
    if theorems.is_empty() {
        String::new()
    } else {
        format!("Useful theorems:\n\n{}\n", retrieval::theorem_listing(theorems))
    }
}

/// Lean code in a model response: the last lean block, or the whole reply
/// when it has no fences but declares something. Echoed imports are dropped.
pub fn candidate_source(response: &str, header: &str) -> Option<String> {
    let code = match textops::last_lean_block(response) {
        Some(b) => b,
        None if !textops::declarations(response).is_empty() => response.to_string(),
        None => return None,
    };
    let code = textops::strip_echoed_prelude(&code, header);
    (!code.trim().is_empty()).then_some(code)
}

fn normalized(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether `candidate` still declares the problem's theorem with the same
/// statement, up to whitespace.
pub fn keeps_statement(candidate: &str, problem: &ProblemStatement) -> bool {
    let Some(name) = problem.theorem_name() else {
        return false;
    };
    textops::take_declaration(candidate, &name).is_some_and(|decl| {
        normalized(textops::statement_head(decl))
            == normalized(textops::statement_head(&problem.statement))
    })
}

fn no_code() -> Diagnostic {
    Diagnostic::error("no Lean code block found in the response")
}

fn statement_changed(problem: &ProblemStatement) -> Diagnostic {
    Diagnostic::error(format!(
        "the theorem statement must stay exactly `{}`",
        normalized(textops::statement_head(&problem.statement))
    ))
}

fn render(t: Template, values: &[(&str, &str)]) -> String {
    t.render(values).expect("prompt values match the template's placeholders")
}

/// Structural problems that make a sketch unusable before it reaches the verifier.
fn sketch_defects(sketch: &str, problem: &ProblemStatement) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if !keeps_statement(sketch, problem) {
        out.push(statement_changed(problem));
    }
    match textops::analyze_sketch(sketch) {
        Ok(a) => out.extend(a.violations()),
        Err(TextError::DuplicateHaves(names)) => out.push(Diagnostic::error(format!(
            "duplicate `have` names: {}; every subgoal needs a distinct name",
            names.join(", ")
        ))),
        Err(e) => out.push(Diagnostic::error(e.to_string())),
    }
    out
}

/// Theorem declarations in `response` whose names are in `wanted`, with
/// their proofs replaced by `sorry`. The first occurrence of a name wins.
fn extracted_statements(response: &str, wanted: &[String], header: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for block in textops::extract_lean_blocks(response) {
        let code = textops::strip_echoed_prelude(&block.source, header);
        for d in textops::declarations(&code) {
            let Some(name) = d.name.as_deref() else { continue };
            if d.is_theorem() && wanted.iter().any(|w| w == name) && !out.contains_key(name) {
                out.insert(name.to_string(), textops::with_sorry_proof(&code[d.start..d.end]));
            }
        }
    }
    out
}

/// A corrected subgoal statement: the declaration named `name`, or else the
/// first theorem in the reply renamed to `name`.
fn corrected_statement(response: &str, name: &str, header: &str) -> Option<String> {
    let code = candidate_source(response, header)?;
    if let Some(d) = textops::take_declaration(&code, name) {
        return Some(textops::with_sorry_proof(d));
    }
    let d = textops::declarations(&code).into_iter().find(|d| d.is_theorem())?;
    let decl = &code[d.start..d.end];
    let decl = match &d.name {
        Some(old) => textops::rename_identifier(decl, old, name),
        None => return None,
    };
    Some(textops::with_sorry_proof(&decl))
}

/// The main theorem from an assembly reply, without any helpers it echoed.
fn assembled_main(response: &str, name: &str, header: &str) -> Option<String> {
    let code = candidate_source(response, header)?;
    textops::take_declaration(&code, name).map(str::to_string)
}

/// Rename helper-internal declarations that clash with names declared
/// elsewhere in the file being assembled.
fn separate_helper_names(helpers: Vec<String>, owners: &[&str], main: &str, depth: u32) -> Vec<String> {
    let mut taken: HashSet<String> = owners.iter().map(|s| s.to_string()).collect();
    taken.extend(textops::declarations(main).into_iter().filter_map(|d| d.name));
    let mut n = 0;
    helpers
        .into_iter()
        .zip(owners)
        .map(|(mut src, own)| {
            let names: Vec<String> = textops::declarations(&src)
                .into_iter()
                .filter_map(|d| d.name)
                .filter(|name| name != own)
                .collect();
            for name in names {
                if taken.insert(name.clone()) {
                    continue;
                }
                let fresh = loop {
                    n += 1;
                    let c = format!("{name}_d{depth}_{n}");
                    if !taken.contains(&c) {
                        break c;
                    }
                };
                taken.insert(fresh.clone());
                src = textops::rename_identifier(&src, &name, &fresh);
            }
            src
        })
        .collect()
}

struct Pooled<S, F> {
    completed: Vec<(usize, Result<S, F>)>,
    decisive: Option<usize>,
}

/// Run traced jobs through the pool. Each job records into its own child
/// trace; those are merged in completion order and cancelled jobs leave a
/// single cancellation event.
async fn pooled<'a, S: Send + 'a, F: Send + 'a>(
    mode: Mode,
    limit: usize,
    jobs: Vec<BoxFuture<'a, (Trace, Result<S, F>)>>,
    trace: &mut Trace,
    depth: u32,
    stage: &str,
) -> Pooled<S, F> {
    let jobs = jobs
        .into_iter()
        .map(|f| {
            Job::new(f.map(|(t, r)| match r {
                Ok(s) => Ok((t, s)),
                Err(e) => Err((t, e)),
            }))
        })
        .collect();
    let out = jobpool::run(mode, jobs, limit).await;
    let mut completed = Vec::with_capacity(out.completed.len());
    for (id, r) in out.completed {
        match r {
            Ok((t, s)) => {
                trace.absorb(t);
                completed.push((id, Ok(s)));
            }
            Err((t, f)) => {
                trace.absorb(t);
                completed.push((id, Err(f)));
            }
        }
    }
    for id in &out.cancelled {
        trace.push(depth, stage, *id as u32 + 1, "pool", "cancelled", "");
    }
    Pooled {
        completed,
        decisive: out.decisive,
    }
}

/// One problem's run: the engine plus an instrumented session.
struct Run<'e> {
    engine: &'e Engine,
    budget: &'e RunBudget,
    session: Session,
}

impl<'e> Run<'e> {
    fn limit(&self) -> usize {
        self.budget.max_concurrency.max(1) as usize
    }

    fn lean_hints(&self) -> &str {
        &self.engine.config.prompts.lean_hints
    }

    async fn ask(
        &self,
        p: &ProblemStatement,
        stage: &str,
        attempt: u32,
        depth: u32,
        prompt: &str,
        trace: &mut Trace,
    ) -> Result<String, BackendError> {
        trace.push(depth, stage, attempt, "reasoner", "request", "");
        let meta = RequestMeta::new(stage, &p.key, depth);
        match self.session.reason(&meta, prompt).await {
            Ok(r) => {
                trace.push(depth, stage, attempt, "reasoner", "response", format!("{} chars", r.len()));
                Ok(r)
            }
            Err(e) => {
                trace.push(depth, stage, attempt, "reasoner", "error", e.to_string());
                Err(e)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    async fn check(
        &self,
        p: &ProblemStatement,
        stage: &str,
        attempt: u32,
        depth: u32,
        source: &str,
        allow_sorry: bool,
        trace: &mut Trace,
    ) -> Result<VerificationReport, BackendError> {
        let meta = RequestMeta::new(stage, &p.key, depth);
        match self.session.verify(&meta, source, allow_sorry).await {
            Ok(r) => {
                trace.push(
                    depth,
                    stage,
                    attempt,
                    "verifier",
                    if r.accepted { "accepted" } else { "rejected" },
                    format!("allow_sorry={allow_sorry}; {} errors", r.errors().len()),
                );
                Ok(r)
            }
            Err(e) => {
                trace.push(depth, stage, attempt, "verifier", "error", e.to_string());
                Err(e)
            }
        }
    }

    async fn retrieve(
        &self,
        p: &ProblemStatement,
        errors: Option<&[Diagnostic]>,
        depth: u32,
        trace: &mut Trace,
    ) -> Result<Vec<TheoremRecord>, BackendError> {
        let Some(index) = self.engine.index.as_deref() else {
            return Ok(Vec::new());
        };
        if !self.session.has_embedder() {
            return Ok(Vec::new());
        }
        retrieval::retrieve_for_problem(
            &self.session,
            index,
            &p.statement,
            errors,
            self.budget.s_queries as usize,
            self.budget.m_results as usize,
            &p.key,
            depth,
            trace,
        )
        .await
    }

    /// Retrieve again with the errors as context when they mention unknown
    /// identifiers, adding new theorems to `theorems`.
    async fn augment(
        &self,
        p: &ProblemStatement,
        diags: &[Diagnostic],
        theorems: &mut Vec<TheoremRecord>,
        depth: u32,
        trace: &mut Trace,
    ) -> Result<(), BackendError> {
        let missing = textops::extract_missing_identifiers(diags);
        if missing.is_empty() || self.engine.index.is_none() || !self.session.has_embedder() {
            return Ok(());
        }
        let names: Vec<&str> = missing.iter().map(String::as_str).collect();
        trace.push(depth, "augment", 0, "engine", "missing_identifiers", names.join(", "));
        for r in self.retrieve(p, Some(diags), depth, trace).await? {
            if !theorems.iter().any(|t| t.full_name == r.full_name) {
                theorems.push(r);
            }
        }
        Ok(())
    }

    async fn prove(&self, p: &ProblemStatement, trace: &mut Trace) -> Step<String> {
        if let Some(proof) = self
            .prover_race(p, self.budget.k_initial_proof, "direct_proof", 0, trace)
            .await?
        {
            return Ok(Some(join_source(&p.header, &proof)));
        }
        Ok(self
            .subgoal_decomposition(p, 1, trace)
            .await?
            .map(|body| join_source(&p.header, &body)))
    }

    /// One prover batch of `k` candidates, raced against the verifier.
    async fn prover_race(
        &self,
        p: &ProblemStatement,
        k: u32,
        stage: &str,
        depth: u32,
        trace: &mut Trace,
    ) -> Step<String> {
        if k == 0 {
            return Ok(None);
        }
        let meta = RequestMeta::new(stage, &p.key, depth);
        trace.push(depth, stage, 0, "prover", "request", format!("{k} candidates"));
        let texts = match self.session.prove(&meta, &prover_prompt(p), k).await {
            Ok(t) => t,
            Err(e) => {
                trace.push(depth, stage, 0, "prover", "error", e.to_string());
                return Err(e);
            }
        };
        let jobs = texts
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let mut t = trace.child();
                async move {
                    let r = self.check_candidate(p, text, stage, i as u32 + 1, depth, &mut t).await;
                    let r = match r {
                        Ok(Some(s)) => Ok(s),
                        Ok(None) => Err(None),
                        Err(e) => Err(Some(e)),
                    };
                    (t, r)
                }
                .boxed()
            })
            .collect();
        let out = pooled(Mode::FirstSuccess, self.limit(), jobs, trace, depth, stage).await;
        let mut first_error = None;
        for (_, r) in out.completed {
            match r {
                Ok(proof) => return Ok(Some(proof)),
                Err(Some(e)) if first_error.is_none() => first_error = Some(e),
                Err(_) => {}
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => {
                trace.push(depth, stage, 0, "prover", "exhausted", "");
                Ok(None)
            }
        }
    }

    async fn check_candidate(
        &self,
        p: &ProblemStatement,
        text: &str,
        stage: &str,
        attempt: u32,
        depth: u32,
        trace: &mut Trace,
    ) -> Step<String> {
        let Some(cand) = candidate_source(text, &p.header) else {
            trace.push(depth, stage, attempt, "engine", "no_code", "");
            return Ok(None);
        };
        if !keeps_statement(&cand, p) {
            trace.push(depth, stage, attempt, "engine", "statement_changed", "");
            return Ok(None);
        }
        let report = self
            .check(p, stage, attempt, depth, &join_source(&p.header, &cand), false, trace)
            .await?;
        Ok(report.accepted.then_some(cand))
    }

    /// Sketch-based decomposition of `p`; returns the proof body (helpers
    /// and main theorem, no header).
    fn subgoal_decomposition<'s>(
        &'s self,
        p: &'s ProblemStatement,
        depth: u32,
        trace: &'s mut Trace,
    ) -> BoxFuture<'s, Step<String>> {
        async move {
            if depth > self.budget.max_depth {
                return Ok(None);
            }
            trace.push(depth, "decomposition", 0, "engine", "start", p.key.clone());
            for attempt in 1..=self.budget.k_sketch_attempts {
                let mut theorems = self.retrieve(p, None, depth, trace).await?;
                let Some(sketch) = self.generate_sketch(p, &theorems, attempt, depth, trace).await? else {
                    continue;
                };
                let Some(state) = self
                    .refine_and_validate_sketch(p, sketch, &mut theorems, depth, trace)
                    .await?
                else {
                    continue;
                };
                if let Some(body) = self.solve_all_subgoals(&state, trace).await? {
                    trace.push(depth, "decomposition", attempt, "engine", "solved", p.key.clone());
                    return Ok(Some(body));
                }
            }
            trace.push(depth, "decomposition", 0, "engine", "failed", p.key.clone());
            Ok(None)
        }
        .boxed()
    }

    async fn generate_sketch(
        &self,
        p: &ProblemStatement,
        theorems: &[TheoremRecord],
        attempt: u32,
        depth: u32,
        trace: &mut Trace,
    ) -> Step<String> {
        let section = useful_theorems_section(theorems);
        let prompt = render(
            Template::InformalProof,
            &[("useful_theorems_section", &section), ("problem", &p.statement)],
        );
        let reply = self.ask(p, "informal_proof", attempt, depth, &prompt, trace).await?;
        let informal = textops::extract_tags(&reply, "informal_proof")
            .into_iter()
            .find(|s| !s.trim().is_empty())
            .unwrap_or_else(|| reply.trim().to_string());
        let prompt = render(
            Template::CreateLeanSketch,
            &[
                ("problem", &p.statement),
                ("useful_theorems_section", &section),
                ("informal_proof", &informal),
                ("lean_hints", self.lean_hints()),
            ],
        );
        let reply = self.ask(p, "sketch", attempt, depth, &prompt, trace).await?;
        let sketch = candidate_source(&reply, &p.header);
        if sketch.is_none() {
            trace.push(depth, "sketch", attempt, "engine", "no_code", "");
        }
        Ok(sketch)
    }

    async fn refine_and_validate_sketch(
        &self,
        p: &ProblemStatement,
        mut sketch: String,
        theorems: &mut Vec<TheoremRecord>,
        depth: u32,
        trace: &mut Trace,
    ) -> Step<DecompositionState> {
        let rounds = self.budget.k_sketch_corrections;
        for round in 1..=rounds {
            let Some(checked) = self.compile_and_correct(p, sketch, theorems, depth, trace).await? else {
                return Ok(None);
            };
            let analysis = textops::analyze_sketch(&checked).unwrap_or_else(|_| SketchAnalysis::default());
            let mut state = DecompositionState {
                problem: p.clone(),
                depth,
                sketch: Some(checked.clone()),
                subgoals: Vec::new(),
                proved: BTreeMap::new(),
                assembled_main: None,
                relevant_theorems: theorems.clone(),
            };
            if analysis.sorried_have_count == 0 {
                // Nothing left open: the sketch is itself a candidate proof.
                trace.push(depth, "sketch_check", round, "engine", "no_subgoals", "");
                state.assembled_main = Some(checked);
                return Ok(Some(state));
            }
            let Some(subgoals) = self
                .extract_subgoals(p, &checked, &analysis, theorems, depth, trace)
                .await?
            else {
                return Ok(None);
            };
            let Some(main) = self.assemble_from_subgoals(p, &checked, &subgoals, depth, trace).await? else {
                return Ok(None);
            };
            match self.validate_subgoals(&subgoals, depth, trace).await? {
                Validation::Valid(proved) => {
                    state.subgoals = subgoals;
                    state.proved = proved;
                    state.assembled_main = Some(main);
                    state.relevant_theorems = theorems.clone();
                    return Ok(Some(state));
                }
                Validation::Invalid(justification) => {
                    if justification.trim().is_empty() {
                        tracing::info!(problem = %p.key, "subgoal rejected without justification");
                    }
                    if round == rounds {
                        break;
                    }
                    let prompt = render(
                        Template::CorrectSketchBasedOnIncorrectSubgoal,
                        &[
                            ("proof_sketch", &checked),
                            ("issues", &justification),
                            ("lean_hints", self.lean_hints()),
                        ],
                    );
                    let reply = self
                        .ask(p, "sketch_refinement", round, depth, &prompt, trace)
                        .await?;
                    match candidate_source(&reply, &p.header) {
                        Some(s) => sketch = s,
                        None => {
                            trace.push(depth, "sketch_refinement", round, "engine", "no_code", "");
                            return Ok(None);
                        }
                    }
                }
            }
        }
        Ok(None)
    }

    /// Check the sketch with `sorry` allowed, correcting it on failure.
    async fn compile_and_correct(
        &self,
        p: &ProblemStatement,
        mut sketch: String,
        theorems: &mut Vec<TheoremRecord>,
        depth: u32,
        trace: &mut Trace,
    ) -> Step<String> {
        let mut source = join_source(&p.header, &sketch);
        let mut diags = Vec::new();
        for round in 0..=self.budget.k_theorem_corrections {
            if round > 0 {
                self.augment(p, &diags, theorems, depth, trace).await?;
                let section = useful_theorems_section(theorems);
                let prompt = render(
                    Template::ProofSketchCorrection,
                    &[
                        ("informal_statement", &p.statement),
                        ("error_message", &textops::render_feedback(&source, &diags)),
                        ("lean_hints", self.lean_hints()),
                        ("useful_theorems_section", &section),
                    ],
                );
                let reply = self.ask(p, "sketch_correction", round, depth, &prompt, trace).await?;
                match candidate_source(&reply, &p.header) {
                    Some(s) => sketch = s,
                    None => {
                        trace.push(depth, "sketch_correction", round, "engine", "no_code", "");
                        diags = vec![no_code()];
                        continue;
                    }
                }
            }
            source = join_source(&p.header, &sketch);
            diags = sketch_defects(&sketch, p);
            if !diags.is_empty() {
                trace.push(
                    depth,
                    "sketch_check",
                    round + 1,
                    "engine",
                    "defects",
                    diags.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; "),
                );
                continue;
            }
            let report = self
                .check(p, "sketch_check", round + 1, depth, &source, true, trace)
                .await?;
            if report.accepted {
                return Ok(Some(sketch));
            }
            diags = report.feedback();
        }
        Ok(None)
    }

    async fn extract_subgoals(
        &self,
        p: &ProblemStatement,
        sketch: &str,
        analysis: &SketchAnalysis,
        theorems: &[TheoremRecord],
        depth: u32,
        trace: &mut Trace,
    ) -> Step<Vec<Subgoal>> {
        let wanted = &analysis.sorried_haves;
        let prompt = render(
            Template::ExtractSubgoalsFromSketch,
            &[("lean_hints", self.lean_hints()), ("proof_sketch", sketch)],
        );
        let reply = self.ask(p, "extract_subgoals", 1, depth, &prompt, trace).await?;
        let mut found = extracted_statements(&reply, wanted, &p.header);
        let missing: Vec<String> = wanted.iter().filter(|n| !found.contains_key(*n)).cloned().collect();
        if !missing.is_empty() {
            trace.push(depth, "extract_subgoals", 1, "engine", "incomplete", missing.join(", "));
            let follow_up = format!(
                "{prompt}\n\nYour previous answer had no theorem for these `have` statements: {}. \
                 Give exactly these, each in its own Lean 4 block, named after its `have`.\n",
                missing.join(", ")
            );
            let reply = self.ask(p, "extract_missing", 1, depth, &follow_up, trace).await?;
            for (name, stmt) in extracted_statements(&reply, &missing, &p.header) {
                found.entry(name).or_insert(stmt);
            }
            let still: Vec<&String> = wanted.iter().filter(|n| !found.contains_key(*n)).collect();
            if !still.is_empty() {
                let still: Vec<&str> = still.iter().map(|s| s.as_str()).collect();
                trace.push(depth, "extract_missing", 1, "engine", "incomplete", still.join(", "));
                return Ok(None);
            }
        }
        let mut subgoals = Vec::with_capacity(wanted.len());
        for name in wanted {
            let Some(sg) = self
                .check_subgoal_statement(p, name, &found[name], wanted, theorems, depth, trace)
                .await?
            else {
                return Ok(None);
            };
            subgoals.push(sg);
        }
        Ok(Some(subgoals))
    }

    #[allow(clippy::too_many_arguments)]
    async fn check_subgoal_statement(
        &self,
        p: &ProblemStatement,
        name: &str,
        statement: &str,
        siblings: &[String],
        theorems: &[TheoremRecord],
        depth: u32,
        trace: &mut Trace,
    ) -> Step<Subgoal> {
        let mut sg = p.subgoal(name, statement, depth);
        let mut diags = Vec::new();
        for round in 0..=self.budget.k_subgoal_error_corrections {
            if round > 0 {
                let section = useful_theorems_section(theorems);
                let prompt = render(
                    Template::SubgoalSyntaxCorrection,
                    &[
                        ("error_message", &textops::render_feedback(&sg.full_source(), &diags)),
                        ("potentially_useful_theorems", &section),
                    ],
                );
                let reply = self
                    .ask(&sg, "subgoal_syntax_correction", round, depth, &prompt, trace)
                    .await?;
                match corrected_statement(&reply, name, &p.header) {
                    Some(s) => sg = p.subgoal(name, &s, depth),
                    None => {
                        trace.push(depth, "subgoal_syntax_correction", round, "engine", "no_code", "");
                        diags = vec![no_code()];
                        continue;
                    }
                }
            }
            let report = self
                .check(&sg, "subgoal_check", round + 1, depth, &sg.full_source(), true, trace)
                .await?;
            if report.accepted {
                let used: Vec<&str> = siblings
                    .iter()
                    .filter(|s| s.as_str() != name && textops::mentions(&sg.statement, s))
                    .map(String::as_str)
                    .collect();
                return Ok(Some(Subgoal {
                    name: name.to_string(),
                    context_note: used.join(", "),
                    problem: sg,
                }));
            }
            diags = report.feedback();
        }
        trace.push(depth, "subgoal_check", 0, "engine", "failed", name);
        Ok(None)
    }

    /// Rewrite the main theorem to use the subgoal theorems, checked with
    /// the subgoals present as sorried declarations.
    async fn assemble_from_subgoals(
        &self,
        p: &ProblemStatement,
        sketch: &str,
        subgoals: &[Subgoal],
        depth: u32,
        trace: &mut Trace,
    ) -> Step<String> {
        let Some(name) = p.theorem_name() else {
            return Ok(None);
        };
        let statements: Vec<&str> = subgoals.iter().map(Subgoal::statement).collect();
        let theorems_string = statements.join("\n\n");
        let prompt = render(
            Template::UseSketchAndTheorems,
            &[("proof_sketch", sketch), ("theorems_string", &theorems_string)],
        );
        let reply = self.ask(p, "assembly", 1, depth, &prompt, trace).await?;
        let mut main = assembled_main(&reply, &name, &p.header);
        let mut parts: Vec<&str> = vec![&p.header];
        parts.extend(statements.iter().copied());
        let mut source = textops::concat_sources(&parts);
        let mut diags = Vec::new();
        for round in 0..=self.budget.k_theorem_corrections {
            if round > 0 {
                let prompt = render(
                    Template::AssemblyCorrection,
                    &[
                        ("error_message", &textops::render_feedback(&source, &diags)),
                        ("lean_hints", self.lean_hints()),
                    ],
                );
                let reply = self
                    .ask(p, "assembly_correction", round, depth, &prompt, trace)
                    .await?;
                main = assembled_main(&reply, &name, &p.header);
            }
            let Some(m) = &main else {
                trace.push(depth, "assembly_check", round + 1, "engine", "no_code", "");
                diags = vec![no_code()];
                continue;
            };
            let mut with_main = parts.clone();
            with_main.push(m);
            source = textops::concat_sources(&with_main);
            diags.clear();
            if !keeps_statement(m, p) {
                diags.push(statement_changed(p));
            }
            if textops::contains_sorry(m) {
                diags.push(Diagnostic::error(
                    "the main theorem still contains `sorry`; use the subgoal theorems instead",
                ));
            }
            if !diags.is_empty() {
                trace.push(depth, "assembly_check", round + 1, "engine", "defects", "");
                continue;
            }
            let report = self
                .check(p, "assembly_check", round + 1, depth, &source, true, trace)
                .await?;
            if report.accepted {
                return Ok(main);
            }
            diags = report.feedback();
        }
        Ok(None)
    }

    /// Prover first for every subgoal; the reasoner judges only those the
    /// prover could not close. The first NO ends validation.
    async fn validate_subgoals(
        &self,
        subgoals: &[Subgoal],
        depth: u32,
        trace: &mut Trace,
    ) -> Result<Validation, BackendError> {
        let jobs = subgoals
            .iter()
            .map(|sg| {
                let mut t = trace.child();
                async move {
                    let r = self.validate_one(&sg.problem, depth, &mut t).await;
                    (t, r)
                }
                .boxed()
            })
            .collect();
        let out = pooled(Mode::FirstFailure, self.limit(), jobs, trace, depth, "validation").await;
        let mut proved = BTreeMap::new();
        for (id, r) in out.completed {
            match r {
                Ok(Some(proof)) => {
                    proved.insert(subgoals[id].name.clone(), proof);
                }
                Ok(None) => {}
                Err(Rejection::Backend(e)) => return Err(e),
                Err(Rejection::Wrong(j)) => {
                    debug_assert_eq!(out.decisive, Some(id));
                    trace.push(depth, "validation", id as u32 + 1, "engine", "invalid", subgoals[id].name.clone());
                    return Ok(Validation::Invalid(j));
                }
            }
        }
        Ok(Validation::Valid(proved))
    }

    async fn validate_one(
        &self,
        p: &ProblemStatement,
        depth: u32,
        trace: &mut Trace,
    ) -> Result<Option<String>, Rejection> {
        if let Some(proof) = self
            .prover_race(p, self.budget.k_formal_proof, "validation_proof", depth, trace)
            .await?
        {
            return Ok(Some(proof));
        }
        match self.correctness(p, depth, trace).await? {
            (true, _) => Ok(None),
            (false, justification) => Err(Rejection::Wrong(justification)),
        }
    }

    /// YES/NO judgement with justification. An unparseable answer is asked
    /// again once and then taken as YES.
    async fn correctness(
        &self,
        p: &ProblemStatement,
        depth: u32,
        trace: &mut Trace,
    ) -> Result<(bool, String), BackendError> {
        let prompt = render(Template::DetermineIfCorrectSubgoal, &[("problem", &p.statement)]);
        for ask in 1..=2 {
            let reply = self.ask(p, "correctness_check", ask, depth, &prompt, trace).await?;
            if let Some(verdict) = textops::parse_verdict(&reply) {
                let justification = textops::extract_tags(&reply, "justification").join("\n");
                trace.push(
                    depth,
                    "correctness_check",
                    ask,
                    "engine",
                    if verdict { "yes" } else { "no" },
                    justification.clone(),
                );
                return Ok((verdict, justification));
            }
            trace.push(depth, "correctness_check", ask, "engine", "unparseable", "");
        }
        trace.push(depth, "correctness_check", 0, "engine", "default_yes", "");
        Ok((true, String::new()))
    }

    /// Solve what validation left open, then assemble and check the file.
    async fn solve_all_subgoals(&self, state: &DecompositionState, trace: &mut Trace) -> Step<String> {
        let p = &state.problem;
        let depth = state.depth;
        let Some(main) = state.assembled_main.as_deref() else {
            return Ok(None);
        };
        let pending: Vec<&Subgoal> = state
            .subgoals
            .iter()
            .filter(|s| !state.proved.contains_key(&s.name))
            .collect();
        let jobs = pending
            .iter()
            .map(|sg| {
                let mut t = trace.child();
                async move {
                    let r = match self.solve_subgoal(sg, depth, &mut t).await {
                        Ok(Some(s)) => Ok(s),
                        Ok(None) => Err(None),
                        Err(e) => Err(Some(e)),
                    };
                    (t, r)
                }
                .boxed()
            })
            .collect();
        let out = pooled(Mode::WaitAll, self.limit(), jobs, trace, depth, "solve_subgoals").await;
        let mut proofs = state.proved.clone();
        let mut unsolved = Vec::new();
        let mut first_error = None;
        for (id, r) in out.completed {
            match r {
                Ok(src) => {
                    proofs.insert(pending[id].name.clone(), src);
                }
                Err(None) => unsolved.push(pending[id].name.as_str()),
                Err(Some(e)) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        if !unsolved.is_empty() {
            trace.push(depth, "solve_subgoals", 0, "engine", "unsolved", unsolved.join(", "));
            return Ok(None);
        }

        let owners: Vec<&str> = state.subgoals.iter().map(|s| s.name.as_str()).collect();
        let helpers: Vec<String> = owners.iter().map(|n| proofs[*n].clone()).collect();
        let helpers = separate_helper_names(helpers, &owners, main, depth);
        let full = match textops::assemble_final_source(&p.header, &helpers, main) {
            Ok(s) => s,
            Err(e) => {
                tracing::error!(problem = %p.key, error = %e, "assembled proof still contains sorry");
                trace.push(depth, "final_check", 1, "engine", "internal_inconsistency", e.to_string());
                return Ok(None);
            }
        };
        let report = self.check(p, "final_check", 1, depth, &full, false, trace).await?;
        if !report.accepted {
            tracing::error!(
                problem = %p.key,
                "final proof rejected although every part was checked; discarding this sketch attempt"
            );
            trace.push(depth, "final_check", 1, "engine", "internal_inconsistency", "");
            return Ok(None);
        }
        Ok(Some(
            textops::assemble_final_source("", &helpers, main).expect("checked for sorry above"),
        ))
    }

    async fn solve_subgoal(&self, sg: &Subgoal, depth: u32, trace: &mut Trace) -> Step<String> {
        let p = &sg.problem;
        if let Some(proof) = self
            .prover_race(p, self.budget.k_formal_proof, "subgoal_proof", depth, trace)
            .await?
        {
            return Ok(Some(proof));
        }
        let mut theorems = self.retrieve(p, None, depth, trace).await?;
        if let Some(proof) = self.shallow_solve(p, &mut theorems, depth, trace).await? {
            return Ok(Some(proof));
        }
        if depth < self.budget.max_depth {
            if let Some(body) = self.subgoal_decomposition(p, depth + 1, trace).await? {
                return Ok(Some(body));
            }
        }
        trace.push(depth, "solve_subgoal", 0, "engine", "failed", p.key.clone());
        Ok(None)
    }

    /// Short reasoner-written proofs with correction rounds. A pass ends
    /// early when a failed candidate is longer than the shallow limit.
    async fn shallow_solve(
        &self,
        p: &ProblemStatement,
        theorems: &mut Vec<TheoremRecord>,
        depth: u32,
        trace: &mut Trace,
    ) -> Step<String> {
        let max_len = self.budget.k_max_shallow_len as usize;
        let prompts = &self.engine.config.prompts;
        for pass in 1..=self.budget.k_informal_passes {
            let section = useful_theorems_section(theorems);
            let prompt = render(
                Template::SolveSubgoal,
                &[
                    ("problem", &p.statement),
                    ("lean_hints", &prompts.lean_hints),
                    ("tactic_hints", &prompts.tactic_hints),
                    ("useful_theorems_section", &section),
                ],
            );
            let reply = self.ask(p, "shallow_solve", pass, depth, &prompt, trace).await?;
            let mut cand = candidate_source(&reply, &p.header);
            let mut correction = 0;
            loop {
                let stage = if correction == 0 { "shallow_solve" } else { "proof_correction" };
                let attempt = if correction == 0 { pass } else { correction };
                let (source, diags) = match &cand {
                    None => (p.full_source(), vec![no_code()]),
                    Some(c) if !keeps_statement(c, p) => {
                        (join_source(&p.header, c), vec![statement_changed(p)])
                    }
                    Some(c) => {
                        let src = join_source(&p.header, c);
                        let r = self.check(p, stage, attempt, depth, &src, false, trace).await?;
                        if r.accepted {
                            return Ok(Some(c.clone()));
                        }
                        (src, r.feedback())
                    }
                };
                let lines = cand.as_deref().map_or(0, textops::count_proof_lines);
                if lines > max_len {
                    trace.push(depth, stage, attempt, "engine", "abandoned", format!("{lines} lines"));
                    break;
                }
                if correction == self.budget.k_proof_correction {
                    break;
                }
                correction += 1;
                self.augment(p, &diags, theorems, depth, trace).await?;
                let section = useful_theorems_section(theorems);
                let prompt = render(
                    Template::ProofCorrection,
                    &[
                        ("error_message", &textops::render_feedback(&source, &diags)),
                        ("useful_theorems_section", &section),
                    ],
                );
                let reply = self
                    .ask(p, "proof_correction", correction, depth, &prompt, trace)
                    .await?;
                cand = candidate_source(&reply, &p.header);
            }
        }
        Ok(None)
    }
}
