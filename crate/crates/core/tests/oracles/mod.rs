//! Independent reference checks shared by the property suites and the
//! acceptance report. Each returns `Err` with a description of the first
//! violation found.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use hilbert_core::jobpool::{self, EventKind, Job, Mode, PoolEvent, SimJob};
use hilbert_core::prompts::Template;
use hilbert_core::retrieval::{EmbeddingIndex, Hit, TheoremRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

// ---------------------------------------------------------------------------
// job pool

pub const MODES: [Mode; 3] = [Mode::WaitAll, Mode::FirstSuccess, Mode::FirstFailure];

/// A random pool script. Durations are drawn from a small range so that
/// simultaneous completions are common.
pub fn pool_script(seed: u64) -> (Vec<SimJob>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=12);
    let limit = rng.random_range(1..=5);
    let p_ok: f64 = rng.random();
    let jobs = (0..n)
        .map(|_| SimJob {
            duration: rng.random_range(0..=12),
            succeeds: rng.random_bool(p_ok),
        })
        .collect();
    (jobs, limit)
}

fn decides(mode: Mode, ok: bool) -> bool {
    match mode {
        Mode::WaitAll => false,
        Mode::FirstSuccess => ok,
        Mode::FirstFailure => !ok,
    }
}

/// Check an event log against the pool rules without reference to any
/// scheduler: bounded and work-conserving concurrency, FIFO starts, exact
/// durations, and the cancellation rule of `mode`.
pub fn check_pool_events(
    mode: Mode,
    jobs: &[SimJob],
    limit: usize,
    events: &[PoolEvent],
    cancelled: &BTreeSet<usize>,
) -> Check {
    let n = jobs.len();
    let mut start: BTreeMap<usize, u64> = BTreeMap::new();
    let mut finish: BTreeMap<usize, (u64, bool)> = BTreeMap::new();
    let mut cancel_ev: BTreeSet<usize> = BTreeSet::new();
    let mut running = 0usize;
    let mut next_start = 0usize;
    let mut decisive: Option<(u64, usize)> = None;
    let mut last_tick = 0u64;

    for (i, e) in events.iter().enumerate() {
        if e.tick < last_tick {
            return Err(format!("event {i} goes back in time"));
        }
        last_tick = e.tick;
        let id = e.job_id;
        if id >= n {
            return Err(format!("event {i} names unknown job {id}"));
        }
        if finish.contains_key(&id) || cancel_ev.contains(&id) {
            return Err(format!("job {id} has an event after its terminal event"));
        }
        match e.event {
            EventKind::Start => {
                if decisive.is_some() {
                    return Err(format!("job {id} started after the pool was decided"));
                }
                if id != next_start {
                    return Err(format!("job {id} started out of submission order"));
                }
                next_start += 1;
                start.insert(id, e.tick);
                running += 1;
                if running > limit {
                    return Err(format!("{running} jobs running with limit {limit}"));
                }
            }
            EventKind::Success | EventKind::Failure => {
                if decisive.is_some() {
                    return Err(format!("job {id} completed after the pool was decided"));
                }
                let Some(&s) = start.get(&id) else {
                    return Err(format!("job {id} completed without starting"));
                };
                let ok = e.event == EventKind::Success;
                if ok != jobs[id].succeeds {
                    return Err(format!("job {id} reported the wrong result"));
                }
                if e.tick - s != jobs[id].duration {
                    return Err(format!("job {id} ran {} ticks, scripted {}", e.tick - s, jobs[id].duration));
                }
                finish.insert(id, (e.tick, ok));
                running -= 1;
                if decides(mode, ok) {
                    decisive = Some((e.tick, id));
                }
            }
            EventKind::Cancel => {
                let Some((dt, _)) = decisive else {
                    return Err(format!("job {id} cancelled before any decisive result"));
                };
                if e.tick != dt {
                    return Err(format!("job {id} cancelled at {} not at decision time {dt}", e.tick));
                }
                cancel_ev.insert(id);
                if start.contains_key(&id) {
                    running -= 1;
                }
            }
        }
        // work conservation: once every event at this tick has been seen, a
        // free slot must not coexist with a waiting job
        let tick_done = events.get(i + 1).is_none_or(|nx| nx.tick != e.tick);
        if tick_done && decisive.is_none() && running < limit && next_start < n {
            return Err(format!("slot idle at tick {} while job {next_start} waits", e.tick));
        }
    }

    if &cancel_ev != cancelled {
        return Err(format!("cancel events {cancel_ev:?} differ from outcome {cancelled:?}"));
    }
    match (mode, decisive) {
        (Mode::WaitAll, _) | (_, None) => {
            if finish.len() != n || !cancelled.is_empty() {
                return Err(format!(
                    "{} of {n} jobs completed and {} cancelled without a decisive result",
                    finish.len(),
                    cancelled.len()
                ));
            }
        }
        (_, Some((dt, did))) => {
            for id in 0..n {
                let done = finish.contains_key(&id);
                if done == cancelled.contains(&id) {
                    return Err(format!("job {id} is neither completed nor cancelled, or both"));
                }
                // a job cancelled while running must truly have been unfinished
                if let (false, Some(&s)) = (done, start.get(&id)) {
                    let natural = (s + jobs[id].duration, id);
                    if natural < (dt, did) {
                        return Err(format!("job {id} was cancelled though it finished first"));
                    }
                }
            }
            let earlier = finish
                .iter()
                .filter(|(id, (t, ok))| (*t, **id) < (dt, did) && decides(mode, *ok))
                .count();
            if earlier > 0 {
                return Err("a decisive result was ignored".into());
            }
        }
    }
    Ok(())
}

fn timed(ms: u64, ok: bool) -> Job<'static, (), ()> {
    Job::new(async move {
        if ms > 0 {
            tokio::time::sleep(Duration::from_millis(ms)).await;
        }
        if ok { Ok(()) } else { Err(()) }
    })
}

/// Run one script on the real executor (one tick per millisecond of paused
/// time) and on the simulator; both logs must obey the rules and agree.
/// Must be called inside a runtime with paused time.
pub async fn check_executor(mode: Mode, jobs: &[SimJob], limit: usize) -> Check {
    let sim = jobpool::simulate(mode, jobs, limit);
    check_pool_events(mode, jobs, limit, &sim.events, &sim.cancelled).map_err(|e| format!("simulator: {e}"))?;
    let real = jobpool::run(mode, jobs.iter().map(|j| timed(j.duration, j.succeeds)).collect(), limit).await;
    check_pool_events(mode, jobs, limit, &real.events, &real.cancelled).map_err(|e| format!("executor: {e}"))?;
    if real.events != sim.events {
        return Err("executor and simulator logs differ".into());
    }
    Ok(())
}

pub fn paused_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .expect("runtime")
}

/// `seeds` random scripts per mode through [`check_executor`].
pub fn pool_suite(seeds: u64) -> Check {
    let rt = paused_runtime();
    for mode in MODES {
        for seed in 0..seeds {
            let (jobs, limit) = pool_script(seed);
            rt.block_on(check_executor(mode, &jobs, limit))
                .map_err(|e| format!("{mode:?} seed {seed}: {e}"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// retrieval

/// A random index of `n` records in which the last `dup` rows copy earlier
/// vectors under other names. Names are shuffled against row order so name
/// ties are not broken by row position by accident.
pub fn random_index(seed: u64, n: usize, dup: usize, dim: usize) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names: Vec<String> = (0..n).map(|i| format!("Lemma.l{i:05}")).collect();
    names.shuffle(&mut rng);
    let mut vectors: Vec<f32> = Vec::with_capacity(n * dim);
    for row in 0..n {
        if row >= n - dup {
            let src = rng.random_range(0..n - dup);
            let copy = vectors[src * dim..(src + 1) * dim].to_vec();
            vectors.extend(copy);
        } else {
            vectors.extend((0..dim).map(|_| rng.random_range(-1.0f32..1.0)));
        }
    }
    let records = names
        .into_iter()
        .map(|name| TheoremRecord {
            formal_statement: format!("theorem {name} : True"),
            informal_description: format!("statement {name}"),
            full_name: name,
        })
        .collect();
    EmbeddingIndex::new(dim, records, vectors).expect("valid index")
}

/// Half random directions, half copies of duplicated rows so the top results
/// contain exact ties.
pub fn random_queries(index: &EmbeddingIndex, seed: u64, count: usize, dup: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = index.len();
    (0..count)
        .map(|i| {
            if i % 2 == 0 || dup == 0 {
                (0..index.dim()).map(|_| rng.random_range(-1.0f32..1.0)).collect()
            } else {
                index.vector(rng.random_range(n - dup..n)).to_vec()
            }
        })
        .collect()
}

/// Exhaustive scan: score every row, sort everything, keep `m`.
pub fn exhaustive_top(index: &EmbeddingIndex, query: &[f32], m: usize) -> Vec<(usize, f64)> {
    let qn = query.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let mut all: Vec<(usize, f64)> = (0..index.len())
        .map(|row| {
            let v = index.vector(row);
            let vn = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(query).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            (row, dot / (vn * qn))
        })
        .collect();
    all.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.record(a.0).full_name.cmp(&index.record(b.0).full_name))
    });
    all.truncate(m);
    all
}

fn compare_hits(index: &EmbeddingIndex, query: &[f32], hits: &[Hit], want: &[(usize, f64)]) -> Check {
    let got: Vec<usize> = hits.iter().map(|h| h.row).collect();
    let rows: Vec<usize> = want.iter().map(|w| w.0).collect();
    if got != rows {
        return Err(format!("rows {got:?}, exhaustive scan gives {rows:?}"));
    }
    let qn = query.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    for (h, w) in hits.iter().zip(want) {
        // the index scores against the raw query; rescale to a cosine
        if (h.similarity / qn - w.1).abs() > 1e-6 {
            return Err(format!("row {} similarity {} vs {}", h.row, h.similarity / qn, w.1));
        }
    }
    for pair in hits.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let ordered = a.similarity > b.similarity
            || (a.similarity == b.similarity
                && index.record(a.row).full_name < index.record(b.row).full_name);
        if !ordered {
            return Err(format!("rows {} and {} out of order", a.row, b.row));
        }
    }
    Ok(())
}

pub struct RetrievalStats {
    pub queries: usize,
    /// Queries whose top results contain at least one exact similarity tie.
    pub with_ties: usize,
}

/// Sequential and default search must both equal the exhaustive scan.
pub fn retrieval_suite(seed: u64, records: usize, dup: usize, queries: usize, m: usize) -> Result<RetrievalStats, String> {
    let index = random_index(seed, records, dup, 32);
    let qs = random_queries(&index, seed, queries, dup);
    let mut with_ties = 0;
    for (i, q) in qs.iter().enumerate() {
        let want = exhaustive_top(&index, q, m);
        let seq = index.search_sequential(q, m).map_err(|e| e.to_string())?;
        compare_hits(&index, q, &seq, &want).map_err(|e| format!("query {i} sequential: {e}"))?;
        let dflt = index.search(q, m).map_err(|e| e.to_string())?;
        compare_hits(&index, q, &dflt, &want).map_err(|e| format!("query {i}: {e}"))?;
        if seq.windows(2).any(|w| w[0].similarity == w[1].similarity) {
            with_ties += 1;
        }
    }
    Ok(RetrievalStats { queries, with_ties })
}

// ---------------------------------------------------------------------------
// prompts

const INPUTS: &str = include_str!("../fixtures/prompts/inputs.json");

fn golden_path(t: Template) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden/prompts")
        .join(format!("{}.txt", t.name()))
}

/// Render every template from the fixture inputs and compare with its golden.
pub fn golden_suite() -> Check {
    let inputs: BTreeMap<String, String> = serde_json::from_str(INPUTS).map_err(|e| e.to_string())?;
    for t in Template::ALL {
        let values: Vec<(&str, &str)> = t
            .placeholders()
            .iter()
            .map(|p| {
                inputs
                    .get(*p)
                    .map(|v| (*p, v.as_str()))
                    .ok_or_else(|| format!("no fixture input for {p}"))
            })
            .collect::<Result<_, _>>()?;
        let got = t.render(&values).map_err(|e| e.to_string())?;
        let path = golden_path(t);
        let want = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        if got != want {
            let line = got
                .lines()
                .zip(want.lines())
                .position(|(a, b)| a != b)
                .map_or_else(|| "length".to_string(), |l| format!("line {}", l + 1));
            return Err(format!("{} differs from golden at {line}", t.name()));
        }
    }
    Ok(())
}
