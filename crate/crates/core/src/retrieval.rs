//! Embedding index over informal theorem descriptions and the
//! query-generation / selection loop that feeds theorems into prompts.
//!
//! Index file layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HILBIDX\0"
//! version  u32      1
//! dim      u32
//! count    u64
//! rec_len  u64      byte length of the record section
//! records  count x (u32 length, JSON object, '\n')
//! padding  zero bytes up to a 4-byte boundary
//! matrix   count x dim f32, row-major
//! ```

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendResult, RequestMeta, Session};
use crate::prompts::Template;
use crate::telemetry::Trace;
use crate::textops::{self, Diagnostic};

const MAGIC: &[u8; 8] = b"HILBIDX\0";
const VERSION: u32 = 1;
#[cfg(feature = "parallel")]
const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index: {0}")]
    Format(String),
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate theorem name {0}")]
    DuplicateName(String),
    #[error("theorem {0} has an empty informal description")]
    EmptyDescription(String),
    #[error("row {0} is a zero vector")]
    ZeroRow(usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TheoremRecord {
    pub full_name: String,
    pub formal_statement: String,
    pub informal_description: String,
}

/// Read a JSONL corpus, rejecting duplicate names and empty descriptions.
pub fn load_corpus(path: &Path) -> crate::Result<Vec<TheoremRecord>> {
    let text = fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TheoremRecord = serde_json::from_str(line)
            .map_err(|e| crate::Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        check_record(&r, &mut seen)?;
        out.push(r);
    }
    Ok(out)
}

fn check_record(r: &TheoremRecord, seen: &mut HashSet<String>) -> Result<(), IndexError> {
    if !seen.insert(r.full_name.clone()) {
        return Err(IndexError::DuplicateName(r.full_name.clone()));
    }
    if r.informal_description.trim().is_empty() {
        return Err(IndexError::EmptyDescription(r.full_name.clone()));
    }
    Ok(())
}

/// Search hit: row index and cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    records: Vec<TheoremRecord>,
    vectors: Vec<f32>,
}

impl EmbeddingIndex {
    /// Rows are L2-normalised on construction.
    pub fn new(dim: usize, records: Vec<TheoremRecord>, mut vectors: Vec<f32>) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::Format("dimension must be positive".into()));
        }
        if vectors.len() != records.len() * dim {
            return Err(IndexError::Format(format!(
                "{} floats for {} records of dimension {dim}",
                vectors.len(),
                records.len()
            )));
        }
        let mut seen = HashSet::new();
        for r in &records {
            check_record(r, &mut seen)?;
        }
        for (i, row) in vectors.chunks_mut(dim).enumerate() {
            let norm = row.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(IndexError::ZeroRow(i));
            }
            for x in row.iter_mut() {
                *x = (f64::from(*x) / norm) as f32;
            }
        }
        Ok(Self {
            dim,
            records,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TheoremRecord] {
        &self.records
    }

    pub fn record(&self, row: usize) -> &TheoremRecord {
        &self.records[row]
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    fn score(&self, row: usize, query: &[f32]) -> f64 {
        self.vector(row)
            .iter()
            .zip(query)
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }

    /// Descending similarity, then ascending name.
    fn rank(&self, a: &Hit, b: &Hit) -> Ordering {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| self.records[a.row].full_name.cmp(&self.records[b.row].full_name))
    }

    fn top_of(&self, mut hits: Vec<Hit>, m: usize) -> Vec<Hit> {
        if hits.len() > m && m > 0 {
            hits.select_nth_unstable_by(m - 1, |a, b| self.rank(a, b));
            hits.truncate(m);
        }
        hits.sort_by(|a, b| self.rank(a, b));
        hits.truncate(m);
        hits
    }

    fn check_query(&self, query: &[f32]) -> Result<(), IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        Ok(())
    }

    /// Exact top-`m` by a single sequential scan.
    pub fn search_sequential(&self, query: &[f32], m: usize) -> Result<Vec<Hit>, IndexError> {
        self.check_query(query)?;
        let hits = (0..self.len())
            .map(|row| Hit {
                row,
                similarity: self.score(row, query),
            })
            .collect();
        Ok(self.top_of(hits, m))
    }

    /// Exact top-`m`; chunks are scanned in parallel and merged.
    #[cfg(feature = "parallel")]
    pub fn search_parallel(&self, query: &[f32], m: usize) -> Result<Vec<Hit>, IndexError> {
        use rayon::prelude::*;
        self.check_query(query)?;
        let rows: Vec<usize> = (0..self.len()).collect();
        let partial: Vec<Hit> = rows
            .par_chunks(CHUNK_ROWS)
            .flat_map_iter(|chunk| {
                let hits = chunk
                    .iter()
                    .map(|&row| Hit {
                        row,
                        similarity: self.score(row, query),
                    })
                    .collect();
                self.top_of(hits, m)
            })
            .collect();
        Ok(self.top_of(partial, m))
    }

    pub fn search(&self, query: &[f32], m: usize) -> Result<Vec<Hit>, IndexError> {
        #[cfg(feature = "parallel")]
        {
            self.search_parallel(query, m)
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.search_sequential(query, m)
        }
    }

    pub fn search_many(&self, queries: &[Vec<f32>], m: usize) -> Result<Vec<Vec<Hit>>, IndexError> {
        queries.iter().map(|q| self.search(q, m)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut records = Vec::new();
        for r in &self.records {
            let json = serde_json::to_vec(r).map_err(|e| IndexError::Format(e.to_string()))?;
            records.extend_from_slice(&((json.len() + 1) as u32).to_le_bytes());
            records.extend_from_slice(&json);
            records.push(b'\n');
        }
        let mut buf = Vec::with_capacity(32 + records.len() + self.vectors.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
        buf.extend_from_slice(&records);
        while buf.len() % 4 != 0 {
            buf.push(0);
        }
        for x in &self.vectors {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let bad = |m: &str| IndexError::Format(m.to_string());
        if bytes.len() < 32 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(IndexError::Format(format!("unsupported version {version}")));
        }
        let dim = u32_at(12) as usize;
        let count = u64_at(16) as usize;
        let rec_len = u64_at(24) as usize;
        let rec_end = 32usize
            .checked_add(rec_len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad("record section overruns file"))?;
        let mut records = Vec::with_capacity(count);
        let mut at = 32;
        while at < rec_end {
            if at + 4 > rec_end {
                return Err(bad("truncated record length"));
            }
            let len = u32_at(at) as usize;
            at += 4;
            let end = at + len;
            if end > rec_end || len == 0 || bytes[end - 1] != b'\n' {
                return Err(bad("truncated record"));
            }
            let r: TheoremRecord = serde_json::from_slice(&bytes[at..end - 1])
                .map_err(|e| IndexError::Format(format!("record {}: {e}", records.len())))?;
            records.push(r);
            at = end;
        }
        if records.len() != count {
            return Err(IndexError::Format(format!(
                "header says {count} records, found {}",
                records.len()
            )));
        }
        let matrix_start = rec_end.div_ceil(4) * 4;
        let expected = count * dim * 4;
        if bytes.len() < matrix_start || bytes.len() - matrix_start != expected {
            return Err(bad("matrix size does not match header"));
        }
        let vectors = bytes[matrix_start..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, records, vectors)
    }
}

fn partial_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".partial");
    PathBuf::from(p)
}

#[derive(Serialize, Deserialize)]
struct CheckpointRow {
    full_name: String,
    vector: Vec<f32>,
}

/// Embed every description in batches and write the index to `out`.
///
/// Finished batches are appended to `<out>.partial`; a failed build keeps that
/// file and a rerun only embeds what is missing.
pub async fn build_index(
    corpus: &[TheoremRecord],
    session: &Session,
    out: &Path,
    batch_size: usize,
) -> crate::Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(IndexError::EmptyCorpus.into());
    }
    let mut seen = HashSet::new();
    for r in corpus {
        check_record(r, &mut seen)?;
    }
    let checkpoint = partial_path(out);
    let mut done: HashMap<String, Vec<f32>> = HashMap::new();
    if let Ok(f) = fs::File::open(&checkpoint) {
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| crate::Error::io(&checkpoint, e))?;
            // a torn final line from an interrupted write is simply redone
            if let Ok(row) = serde_json::from_str::<CheckpointRow>(&line) {
                done.insert(row.full_name, row.vector);
            }
        }
    }
    let mut dim = done.values().next().map(Vec::len);
    let todo: Vec<&TheoremRecord> = corpus.iter().filter(|r| !done.contains_key(&r.full_name)).collect();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&checkpoint)
        .map_err(|e| crate::Error::io(&checkpoint, e))?;
    let meta = RequestMeta::new("index_build", "corpus", 0);
    for batch in todo.chunks(batch_size.max(1)) {
        let texts: Vec<String> = batch.iter().map(|r| r.informal_description.clone()).collect();
        let vectors = session.embed(&meta, &texts, dim).await?;
        let mut lines = Vec::new();
        for (r, v) in batch.iter().zip(vectors) {
            dim.get_or_insert(v.len());
            serde_json::to_writer(&mut lines, &CheckpointRow {
                full_name: r.full_name.clone(),
                vector: v.clone(),
            })?;
            lines.push(b'\n');
            done.insert(r.full_name.clone(), v);
        }
        file.write_all(&lines)
            .and_then(|_| file.flush())
            .map_err(|e| crate::Error::io(&checkpoint, e))?;
    }
    let dim = dim.ok_or(IndexError::EmptyCorpus)?;
    let mut vectors = Vec::with_capacity(corpus.len() * dim);
    for r in corpus {
        let v = &done[&r.full_name];
        if v.len() != dim {
            return Err(IndexError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            }
            .into());
        }
        vectors.extend_from_slice(v);
    }
    let index = EmbeddingIndex::new(dim, corpus.to_vec(), vectors)?;
    index.save(out)?;
    let _ = fs::remove_file(&checkpoint);
    Ok(index)
}

/// Records as plain-text blocks: name, statement, description.
pub fn theorem_listing(records: &[TheoremRecord]) -> String {
    records
        .iter()
        .map(|r| {
            format!(
                "{}\n{}\n{}",
                r.full_name,
                r.formal_statement.trim(),
                r.informal_description.trim()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// The problem text sent for query generation, with prior errors appended.
pub fn query_problem_text(problem: &str, error_context: Option<&[Diagnostic]>) -> String {
    match error_context {
        Some(diags) if !diags.is_empty() => {
            let mut s = format!(
                "{}\n\nThe previous attempt failed with the following errors:\n",
                problem.trim_end()
            );
            for d in diags {
                s.push_str(&d.to_string());
                s.push('\n');
            }
            s
        }
        _ => problem.to_string(),
    }
}

/// Ask the reasoner for search queries, search each, and let it pick the
/// relevant theorems from the union. Names it invents are dropped.
#[allow(clippy::too_many_arguments)]
pub async fn retrieve_for_problem(
    session: &Session,
    index: &EmbeddingIndex,
    problem: &str,
    error_context: Option<&[Diagnostic]>,
    s_queries: usize,
    m_results: usize,
    key: &str,
    depth: u32,
    trace: &mut Trace,
) -> BackendResult<Vec<TheoremRecord>> {
    let query_prompt = Template::SearchQuery
        .render(&[("problem", &query_problem_text(problem, error_context))])
        .expect("search query template takes only problem");
    let meta = RequestMeta::new("search_query", key, depth);
    trace.push(depth, "search_query", 1, "reasoner", "request", "");
    let reply = session.reason(&meta, &query_prompt).await?;
    let queries: Vec<String> = textops::extract_tags(&reply, "search")
        .into_iter()
        .filter(|q| !q.is_empty())
        .take(s_queries)
        .collect();
    if queries.is_empty() {
        trace.push(depth, "search_query", 1, "reasoner", "no_queries", "no <search> tags in response");
        tracing::info!(problem = key, "retrieval produced no queries");
        return Ok(Vec::new());
    }
    trace.push(depth, "search_query", 1, "reasoner", "response", format!("{} queries", queries.len()));

    let meta = RequestMeta::new("embed_queries", key, depth);
    trace.push(depth, "embed_queries", 1, "embedder", "request", format!("{} texts", queries.len()));
    let vectors = session.embed(&meta, &queries, Some(index.dim())).await?;
    let mut seen = HashSet::new();
    let mut candidates: Vec<&TheoremRecord> = Vec::new();
    for v in &vectors {
        let hits = index.search(v, m_results).map_err(|e| {
            crate::error::BackendError::Protocol(e.to_string())
        })?;
        for h in hits {
            let r = index.record(h.row);
            if seen.insert(r.full_name.as_str()) {
                candidates.push(r);
            }
        }
    }
    trace.push(depth, "search", 1, "index", "results", format!("{} candidates", candidates.len()));
    if candidates.is_empty() {
        return Ok(Vec::new());
    }

    let listing = theorem_listing(&candidates.iter().map(|r| (*r).clone()).collect::<Vec<_>>());
    let answer_prompt = Template::SearchAnswer
        .render(&[("problem", problem), ("theorems", &listing)])
        .expect("search answer template takes problem and theorems");
    let meta = RequestMeta::new("search_answer", key, depth);
    trace.push(depth, "search_answer", 1, "reasoner", "request", "");
    let reply = session.reason(&meta, &answer_prompt).await?;
    let by_name: HashMap<&str, &TheoremRecord> =
        candidates.iter().map(|r| (r.full_name.as_str(), *r)).collect();
    let mut picked = Vec::new();
    let mut taken = HashSet::new();
    for name in textops::extract_tags(&reply, "theorem") {
        match by_name.get(name.as_str()) {
            Some(r) if taken.insert(name.clone()) => picked.push((*r).clone()),
            Some(_) => {}
            None => {
                tracing::info!(problem = key, name, "dropping theorem not among candidates");
                trace.push(depth, "search_answer", 1, "reasoner", "dropped", name);
            }
        }
    }
    trace.push(depth, "search_answer", 1, "reasoner", "response", format!("{} selected", picked.len()));
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(name: &str) -> TheoremRecord {
        TheoremRecord {
            full_name: name.into(),
            formal_statement: format!("theorem {name} : True"),
            informal_description: format!("about {name}"),
        }
    }

    fn index(rows: &[(&str, &[f32])]) -> EmbeddingIndex {
        let dim = rows[0].1.len();
        EmbeddingIndex::new(
            dim,
            rows.iter().map(|(n, _)| rec(n)).collect(),
            rows.iter().flat_map(|(_, v)| v.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_first() {
        let idx = index(&[("a", &[1.0, 0.0, 0.0]), ("b", &[0.0, 1.0, 0.0]), ("c", &[0.6, 0.8, 0.0])]);
        let hits = idx.search(idx.vector(2), 3).unwrap();
        assert_eq!(hits[0].row, 2);
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_query_orders_by_name() {
        let idx = index(&[("zeta", &[1.0, 0.0, 0.0]), ("alpha", &[1.0, 0.0, 0.0]), ("mid", &[-1.0, 0.0, 0.0])]);
        let hits = idx.search(&[0.0, 1.0, 0.0], 3).unwrap();
        let names: Vec<_> = hits.iter().map(|h| idx.record(h.row).full_name.as_str()).collect();
        assert_eq!(names, vec!["alpha", "mid", "zeta"]);
        assert!(hits.iter().all(|h| h.similarity == 0.0));
    }

    #[test]
    fn m_larger_than_index() {
        let idx = index(&[("a", &[1.0, 0.0]), ("b", &[0.0, 1.0])]);
        assert_eq!(idx.search(&[1.0, 0.0], 5).unwrap().len(), 2);
        assert!(idx.search(&[1.0, 0.0], 0).unwrap().is_empty());
        assert!(matches!(idx.search(&[1.0], 1), Err(IndexError::DimensionMismatch { .. })));
    }

    #[test]
    fn rows_are_normalised() {
        let idx = index(&[("a", &[3.0, 4.0])]);
        assert_eq!(idx.vector(0), &[0.6, 0.8]);
        assert!(matches!(
            EmbeddingIndex::new(2, vec![rec("a")], vec![0.0, 0.0]),
            Err(IndexError::ZeroRow(0))
        ));
        assert!(matches!(
            EmbeddingIndex::new(1, vec![rec("a"), rec("a")], vec![1.0, 1.0]),
            Err(IndexError::DuplicateName(_))
        ));
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let idx = index(&[("Nat.add_comm", &[1.0, 2.0, 2.0]), ("ünï", &[0.0, 0.0, 1.0])]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.idx");
        idx.save(&p).unwrap();
        assert_eq!(EmbeddingIndex::load(&p).unwrap(), idx);
        let mut bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        bytes.truncate(bytes.len() - 2);
        assert!(EmbeddingIndex::from_bytes(&bytes).is_err());
        assert!(EmbeddingIndex::from_bytes(b"not an index at all, clearly not").is_err());
    }

    #[test]
    fn query_text_carries_errors() {
        let d = vec![Diagnostic::error("unknown identifier 'Rat.den_div_natCast_eq_one_iff'").at(3, 5)];
        let t = query_problem_text("theorem x : True := sorry", Some(&d));
        assert!(t.ends_with("line 3, col 5: error: unknown identifier 'Rat.den_div_natCast_eq_one_iff'\n"));
        assert_eq!(query_problem_text("p", None), "p");
    }
}
