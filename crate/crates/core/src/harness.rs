//! Datasets, resumable benchmark runs and reports.
//!
//! A run directory holds `records.jsonl` (one [`RunRecord`] per finished
//! problem, append-only) and a subdirectory per problem with `trace.jsonl` and,
//! when solved, `proof.lean`. Reports are computed from the records alone.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunBudget;
use crate::jobpool::{self, Job};
use crate::pipeline::Engine;
use crate::problem::{ProblemStatement, ProofResult, ProofStatus};
use crate::telemetry::{write_trace_jsonl, Outcome, TelemetrySnapshot};
use crate::textops;
use crate::{Error, Result};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkProblem {
    pub id: String,
    pub header: String,
    pub formal_statement: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl BenchmarkProblem {
    pub fn to_problem(&self) -> Result<ProblemStatement> {
        ProblemStatement::root(self.id.clone(), self.header.clone(), self.formal_statement.clone())
            .map_err(|e| Error::Dataset(format!("problem {}: {e}", self.id)))
    }
}

fn parse_dataset(text: &str) -> Result<Vec<BenchmarkProblem>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: BenchmarkProblem = serde_json::from_str(line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        if !ids.insert(p.id.clone()) {
            return Err(Error::Dataset(format!("line {}: duplicate id {}", i + 1, p.id)));
        }
        p.to_problem()?;
        out.push(p);
    }
    Ok(out)
}

/// Read a JSONL dataset. Duplicate ids and statements without a `sorry`
/// proof are rejected before anything runs.
pub fn load_dataset(path: &Path) -> Result<Vec<BenchmarkProblem>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Turn Lean files into dataset entries, one per theorem. Imports, options
/// and any non-theorem declarations of a file form the header of its entries.
pub fn convert_lean_files(paths: &[PathBuf]) -> Result<Vec<BenchmarkProblem>> {
    let mut files = Vec::new();
    for p in paths {
        collect_lean_files(p, &mut files)?;
    }
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for f in files {
        let src = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let (prelude, _) = textops::split_prelude(&src);
        let decls = textops::declarations(&src);
        let mut header = vec![prelude.trim().to_string()];
        header.extend(
            decls
                .iter()
                .filter(|d| !d.is_theorem())
                .map(|d| src[d.start..d.end].trim().to_string()),
        );
        let header = header
            .into_iter()
            .filter(|h| !h.is_empty())
            .collect::<Vec<_>>()
            .join("\n\n");
        for d in decls.iter().filter(|d| d.is_theorem()) {
            let Some(name) = d.name.clone() else { continue };
            if !ids.insert(name.clone()) {
                return Err(Error::Dataset(format!("{}: duplicate theorem {name}", f.display())));
            }
            out.push(BenchmarkProblem {
                id: name,
                header: header.clone(),
                formal_statement: textops::with_sorry_proof(&src[d.start..d.end]),
                split: None,
                tags: Vec::new(),
            });
        }
    }
    Ok(out)
}

fn collect_lean_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for e in entries {
            if e.is_dir() || e.extension().is_some_and(|x| x == "lean") {
                collect_lean_files(&e, out)?;
            }
        }
        Ok(())
    } else if path.exists() {
        out.push(path.to_path_buf());
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

pub fn write_dataset(problems: &[BenchmarkProblem], path: &Path) -> Result<()> {
    let mut s = String::new();
    for p in problems {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub problem_id: String,
    pub result: ProofResult,
    pub budget: RunBudget,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub engine_version: String,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Records in `dir/records.jsonl`. A torn final line left by an interrupted
/// run is ignored, so that problem runs again.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join(RECORDS_FILE);
    let f = match fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) if Some(i) == last => {
                tracing::warn!(path = %path.display(), error = %e, "ignoring torn final record");
            }
            Err(e) => {
                return Err(Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)));
            }
        }
    }
    Ok(out)
}

/// Cut a partially written final line so new records start on a fresh line.
fn drop_torn_tail(path: &Path) -> Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let f = fs::OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(keep as u64).map_err(|e| Error::io(path, e))
}

/// Directory name for a problem id.
pub fn problem_dir(out: &Path, id: &str) -> PathBuf {
    let safe: String = id
        .chars()
        .map(|c| if c.is_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    out.join(safe)
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    /// Wall-clock cap per problem.
    pub timeout: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSummary {
    pub total: usize,
    pub solved: usize,
    pub errors: usize,
    pub executed: usize,
    pub mean_reasoner_calls: f64,
    pub mean_prover_calls: f64,
    pub mean_verifier_calls: f64,
    pub mean_total_tokens: f64,
}

impl BenchSummary {
    pub fn from_records(records: &[RunRecord], executed: usize) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: fn(&TelemetrySnapshot) -> u64| {
            records.iter().map(|r| f(&r.result.telemetry) as f64).sum::<f64>() / n
        };
        Self {
            total: records.len(),
            solved: records
                .iter()
                .filter(|r| r.result.status == ProofStatus::Proved)
                .count(),
            errors: records
                .iter()
                .filter(|r| r.result.telemetry.outcome == Outcome::Error)
                .count(),
            executed,
            mean_reasoner_calls: mean(|t| t.reasoner_calls),
            mean_prover_calls: mean(|t| t.prover_calls),
            mean_verifier_calls: mean(|t| t.verifier_calls),
            mean_total_tokens: mean(TelemetrySnapshot::total_tokens),
        }
    }
}

impl fmt::Display for BenchSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "solved {}/{}", self.solved, self.total)?;
        writeln!(f, "errors {}", self.errors)?;
        writeln!(f, "executed this run {}", self.executed)?;
        writeln!(
            f,
            "mean calls: reasoner {:.2}, prover {:.2}, verifier {:.2}",
            self.mean_reasoner_calls, self.mean_prover_calls, self.mean_verifier_calls
        )?;
        write!(f, "mean tokens {:.1}", self.mean_total_tokens)
    }
}

fn write_problem_files(out: &Path, id: &str, result: &ProofResult) -> Result<()> {
    let dir = problem_dir(out, id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let trace_path = dir.join("trace.jsonl");
    let f = fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_trace_jsonl(&result.trace, &mut w).map_err(|e| Error::io(&trace_path, e))?;
    w.flush().map_err(|e| Error::io(&trace_path, e))?;
    if let Some(src) = &result.proof_source {
        let p = dir.join("proof.lean");
        fs::write(&p, src).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Run every problem of `dataset` not yet recorded in `out`, concurrently,
/// appending one record per problem as it finishes.
pub async fn run_benchmark(
    engine: &Engine,
    dataset: &[BenchmarkProblem],
    out: &Path,
    opts: &BenchOptions,
) -> Result<BenchSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    drop_torn_tail(&out.join(RECORDS_FILE))?;
    let done: HashSet<String> = read_records(out)?.into_iter().map(|r| r.problem_id).collect();
    let pending: Vec<(&BenchmarkProblem, ProblemStatement)> = dataset
        .iter()
        .filter(|p| !done.contains(&p.id))
        .map(|p| p.to_problem().map(|s| (p, s)))
        .collect::<Result<_>>()?;
    let records_path = out.join(RECORDS_FILE);
    let appender = Mutex::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&records_path)
            .map_err(|e| Error::io(&records_path, e))?,
    );
    let budget = engine.config().budget.clone();
    let jobs: Vec<Job<'_, (), Error>> = pending
        .iter()
        .map(|(bp, problem)| {
            let appender = &appender;
            let budget = &budget;
            let records_path = &records_path;
            Job::new(async move {
                let started = unix_ms();
                tracing::info!(problem = %bp.id, "starting");
                let result = engine.generate_proof_within(problem, opts.timeout).await;
                tracing::info!(problem = %bp.id, outcome = result.telemetry.outcome.as_str(), "finished");
                write_problem_files(out, &bp.id, &result)?;
                let record = RunRecord {
                    problem_id: bp.id.clone(),
                    result,
                    budget: budget.clone(),
                    started_unix_ms: started,
                    finished_unix_ms: unix_ms(),
                    engine_version: ENGINE_VERSION.to_string(),
                };
                let mut line = serde_json::to_string(&record)?;
                line.push('\n');
                let mut f = appender.lock().expect("record appender poisoned");
                f.write_all(line.as_bytes())
                    .and_then(|_| f.flush())
                    .map_err(|e| Error::io(records_path, e))
            })
        })
        .collect();
    let limit = budget.max_concurrency.max(1) as usize;
    let outcome = jobpool::run_wait_all(jobs, limit).await;
    for (_, r) in outcome.into_completed() {
        r?;
    }
    let ids: HashSet<&str> = dataset.iter().map(|p| p.id.as_str()).collect();
    let records: Vec<RunRecord> = read_records(out)?
        .into_iter()
        .filter(|r| ids.contains(r.problem_id.as_str()))
        .collect();
    Ok(BenchSummary::from_records(&records, pending.len()))
}

// ---------------------------------------------------------------------------
// reports

pub const REPORT_FILES: [&str; 5] = [
    "pass_rate_vs_reasoner_calls.csv",
    "pass_rate_vs_total_calls.csv",
    "pass_rate_vs_tokens.csv",
    "proof_length_histogram.csv",
    "summary.txt",
];

/// Cumulative pass rate: for each distinct budget among solved problems,
/// how many were solved within it, as a fraction of all records.
pub fn pass_rate_csv(records: &[RunRecord], budget_of: impl Fn(&TelemetrySnapshot) -> u64) -> String {
    let mut by_budget: BTreeMap<u64, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.result.status == ProofStatus::Proved) {
        *by_budget.entry(budget_of(&r.result.telemetry)).or_default() += 1;
    }
    let total = records.len();
    let mut out = String::from("budget,solved,pass_rate\n");
    let mut solved = 0;
    for (x, n) in by_budget {
        solved += n;
        let rate = if total == 0 { 0.0 } else { solved as f64 / total as f64 };
        let _ = writeln!(out, "{x},{solved},{rate:.6}");
    }
    out
}

fn proof_lengths(records: &[RunRecord]) -> Vec<usize> {
    records
        .iter()
        .filter(|r| r.result.status == ProofStatus::Proved)
        .filter_map(|r| r.result.telemetry.proof_line_count)
        .collect()
}

/// Proof lengths in buckets of ten lines, from the first to the last
/// non-empty bucket.
pub fn histogram_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("bucket_start,bucket_end,count\n");
    let lengths = proof_lengths(records);
    let (Some(lo), Some(hi)) = (lengths.iter().min(), lengths.iter().max()) else {
        return out;
    };
    for b in (lo / 10)..=(hi / 10) {
        let count = lengths.iter().filter(|&&l| l / 10 == b).count();
        let _ = writeln!(out, "{},{},{count}", b * 10, b * 10 + 9);
    }
    out
}

pub fn summary_text(records: &[RunRecord]) -> String {
    let s = BenchSummary::from_records(records, 0);
    let lengths = proof_lengths(records);
    let mut out = String::new();
    let _ = writeln!(out, "records: {}", s.total);
    let _ = writeln!(out, "solved: {}", s.solved);
    let rate = if s.total == 0 { 0.0 } else { s.solved as f64 / s.total as f64 };
    let _ = writeln!(out, "pass_rate: {rate:.6}");
    let _ = writeln!(out, "errors: {}", s.errors);
    if lengths.is_empty() {
        let _ = writeln!(out, "mean_proof_lines: n/a");
        let _ = writeln!(out, "max_proof_lines: n/a");
    } else {
        let mean = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
        let _ = writeln!(out, "mean_proof_lines: {mean:.2}");
        let _ = writeln!(out, "max_proof_lines: {}", lengths.iter().max().unwrap());
    }
    let _ = writeln!(out, "mean_reasoner_calls: {:.2}", s.mean_reasoner_calls);
    let _ = writeln!(out, "mean_prover_calls: {:.2}", s.mean_prover_calls);
    let _ = writeln!(out, "mean_verifier_calls: {:.2}", s.mean_verifier_calls);
    let _ = writeln!(out, "mean_total_tokens: {:.2}", s.mean_total_tokens);
    out
}

/// Report file contents, keyed by file name.
pub fn build_report(records: &[RunRecord]) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::new();
    m.insert(REPORT_FILES[0], pass_rate_csv(records, |t| t.reasoner_calls));
    m.insert(REPORT_FILES[1], pass_rate_csv(records, TelemetrySnapshot::total_calls));
    m.insert(REPORT_FILES[2], pass_rate_csv(records, TelemetrySnapshot::total_tokens));
    m.insert(REPORT_FILES[3], histogram_csv(records));
    m.insert(REPORT_FILES[4], summary_text(records));
    m
}

/// Write the report for run directory `dir` into `dir/report/`.
pub fn report(dir: &Path) -> Result<PathBuf> {
    let records = read_records(dir)?;
    if records.is_empty() {
        return Err(Error::Dataset(format!("{} has no run records", dir.display())));
    }
    let out = dir.join("report");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for (name, body) in build_report(&records) {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(out)
}
