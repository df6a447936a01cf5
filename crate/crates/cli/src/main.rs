use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hilbert_core::backends::{serve_mock, Backends, MockBackends, RequestMeta};
use hilbert_core::config::load_config;
use hilbert_core::harness::{self, BenchOptions};
use hilbert_core::retrieval::{self, EmbeddingIndex};
use hilbert_core::telemetry::write_trace_jsonl;
use hilbert_core::{Config, Engine, Outcome, ProblemStatement, ProofStatus, RunTelemetry};

#[derive(Parser)]
#[command(name = "hilbert", version, about = "Prove Lean 4 theorems by recursive subgoal decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prove the single sorried theorem in a Lean file.
    Prove {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        problem: PathBuf,
        /// Problem name for traces and mock keys; defaults to the theorem name.
        #[arg(long)]
        name: Option<String>,
        /// Where to write the proof, if one is found.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the trace as JSONL.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        timeout_s: Option<u64>,
    },
    /// Run a JSONL dataset, resuming from whatever `--out` already holds.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Wall-clock cap per problem.
        #[arg(long)]
        timeout_s: Option<u64>,
    },
    /// Write CSV tables and a summary for a bench run into `<run>/report`.
    Report { run: PathBuf },
    /// Build or query a retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Serve the scripted mock backends over HTTP.
    MockServe {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Turn Lean files or directories into a JSONL dataset, one entry per theorem.
    Convert {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed a theorem corpus and write an index file.
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config naming the embedder endpoint.
        #[arg(long, env = "HILBERT_CONFIG")]
        config: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Print the nearest theorems to a text.
    Query {
        #[arg(long)]
        idx: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(short = 'm', default_value_t = 5)]
        m: usize,
        #[arg(long, env = "HILBERT_CONFIG")]
        config: PathBuf,
    },
}

fn config(path: &Path) -> anyhow::Result<Config> {
    load_config(path).with_context(|| format!("loading {}", path.display()))
}

fn backends(config: &Config) -> anyhow::Result<Backends> {
    Ok(Backends::from_config(config)?)
}

async fn prove(
    config_path: &Path,
    problem: &Path,
    name: Option<&str>,
    out: Option<&Path>,
    trace: Option<&Path>,
    timeout: Option<Duration>,
) -> anyhow::Result<ExitCode> {
    let engine = Engine::from_config(config(config_path)?)?;
    let src = std::fs::read_to_string(problem).with_context(|| format!("reading {}", problem.display()))?;
    let problem = ProblemStatement::from_lean_file(name, &src)?;
    let result = engine.generate_proof_within(&problem, timeout).await;
    if let Some(path) = trace {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_trace_jsonl(&result.trace, std::io::BufWriter::new(f))?;
    }
    if let (Some(path), Some(src)) = (out, &result.proof_source) {
        std::fs::write(path, src).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(match (result.status, result.telemetry.outcome) {
        (ProofStatus::Proved, _) => ExitCode::SUCCESS,
        (_, Outcome::Error) => {
            eprintln!("error: {}", result.error.as_deref().unwrap_or("run failed"));
            ExitCode::from(2)
        }
        _ => ExitCode::from(1),
    })
}

async fn bench(config_path: &Path, dataset: &Path, out: &Path, timeout: Option<Duration>) -> anyhow::Result<ExitCode> {
    let problems = harness::load_dataset(dataset)?;
    let engine = Engine::from_config(config(config_path)?)?;
    let summary = harness::run_benchmark(&engine, &problems, out, &BenchOptions { timeout }).await?;
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

async fn index_build(corpus: &Path, out: &Path, config_path: &Path, batch_size: usize) -> anyhow::Result<ExitCode> {
    if batch_size == 0 {
        bail!("--batch-size must be positive");
    }
    let records = retrieval::load_corpus(corpus)?;
    let backends = backends(&config(config_path)?)?;
    let session = backends.session(RunTelemetry::new());
    let index = retrieval::build_index(&records, &session, out, batch_size).await?;
    println!("indexed {} theorems, dim {}, into {}", index.len(), index.dim(), out.display());
    Ok(ExitCode::SUCCESS)
}

async fn index_query(idx: &Path, text: &str, m: usize, config_path: &Path) -> anyhow::Result<ExitCode> {
    let index = EmbeddingIndex::load(idx).with_context(|| format!("loading {}", idx.display()))?;
    let backends = backends(&config(config_path)?)?;
    let session = backends.session(RunTelemetry::new());
    let meta = RequestMeta::new("index_query", "cli", 0);
    let query = session
        .embed(&meta, &[text.to_string()], Some(index.dim()))
        .await?
        .pop()
        .context("embedder returned no vector")?;
    for hit in index.search(&query, m)? {
        let r = index.record(hit.row);
        println!("{:.6}\t{}\t{}", hit.similarity, r.full_name, r.formal_statement);
    }
    Ok(ExitCode::SUCCESS)
}

async fn mock_serve(script: &Path, host: &str, port: u16) -> anyhow::Result<ExitCode> {
    let mock = MockBackends::from_file(script)?;
    let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
    let server = serve_mock(mock, addr).await?;
    println!("listening on {}", server.base_url());
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = server.wait() => {}
    }
    Ok(ExitCode::SUCCESS)
}

fn convert(inputs: &[PathBuf], out: &Path) -> anyhow::Result<ExitCode> {
    let problems = harness::convert_lean_files(inputs)?;
    harness::write_dataset(&problems, out)?;
    println!("wrote {} problems to {}", problems.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

async fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let secs = |s: Option<u64>| s.map(Duration::from_secs);
    match cli.command {
        Command::Prove {
            config,
            problem,
            name,
            out,
            trace,
            timeout_s,
        } => prove(&config, &problem, name.as_deref(), out.as_deref(), trace.as_deref(), secs(timeout_s)).await,
        Command::Bench {
            config,
            dataset,
            out,
            timeout_s,
        } => bench(&config, &dataset, &out, secs(timeout_s)).await,
        Command::Report { run } => {
            let dir = harness::report(&run)?;
            println!("{}", std::fs::read_to_string(dir.join("summary.txt"))?.trim_end());
            Ok(ExitCode::SUCCESS)
        }
        Command::Index(IndexCommand::Build {
            corpus,
            out,
            config,
            batch_size,
        }) => index_build(&corpus, &out, &config, batch_size).await,
        Command::Index(IndexCommand::Query { idx, text, m, config }) => index_query(&idx, &text, m, &config).await,
        Command::MockServe { script, port, host } => mock_serve(&script, &host, port).await,
        Command::Convert { inputs, out } => convert(&inputs, &out),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
