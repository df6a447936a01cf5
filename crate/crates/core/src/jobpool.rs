//! Bounded-concurrency job pool with three completion criteria.
//!
//! Jobs are futures; at most `limit` are polled at a time and the rest wait in
//! submission order. Completions are consumed in a total order: by completion
//! instant, and among jobs that complete at the same instant, by submission
//! index. In [`Mode::FirstSuccess`] and [`Mode::FirstFailure`] the decisive job
//! ends the pool; every job after it in that order, running or still queued,
//! is cancelled by dropping its future, so it can have no further effect.
//!
//! [`simulate`] is a discrete-event model of the same rules over scripted
//! durations, used as an oracle for the real executor.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;

use futures::future::BoxFuture;
use futures::stream::{FuturesUnordered, StreamExt};
use futures::FutureExt;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    WaitAll,
    FirstSuccess,
    FirstFailure,
}

type CancelHook<'a> = Box<dyn FnOnce() + Send + 'a>;

/// One unit of work. Its id is its submission index.
pub struct Job<'a, S, F> {
    work: BoxFuture<'a, Result<S, F>>,
    on_cancel: Option<CancelHook<'a>>,
}

impl<'a, S, F> Job<'a, S, F> {
    pub fn new(work: impl std::future::Future<Output = Result<S, F>> + Send + 'a) -> Self {
        Self {
            work: work.boxed(),
            on_cancel: None,
        }
    }

    /// Called once if the job is cancelled, whether or not it had started.
    pub fn on_cancel(mut self, hook: impl FnOnce() + Send + 'a) -> Self {
        self.on_cancel = Some(Box::new(hook));
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    Success,
    Failure,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEvent {
    pub tick: u64,
    pub job_id: usize,
    pub event: EventKind,
}

pub fn write_events_jsonl(events: &[PoolEvent], mut out: impl Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct PoolOutcome<S, F> {
    pub mode: Mode,
    /// Consumed results in completion order.
    pub completed: Vec<(usize, Result<S, F>)>,
    /// The job that ended the pool early, if any.
    pub decisive: Option<usize>,
    pub cancelled: BTreeSet<usize>,
    /// Start/finish/cancel events; ticks are milliseconds since the pool began.
    pub events: Vec<PoolEvent>,
}

impl<S, F> PoolOutcome<S, F> {
    /// The earliest success under [`Mode::FirstSuccess`].
    pub fn winner(&self) -> Option<(usize, &S)> {
        if self.mode != Mode::FirstSuccess {
            return None;
        }
        let id = self.decisive?;
        self.completed.iter().find_map(|(i, r)| match r {
            Ok(s) if *i == id => Some((id, s)),
            _ => None,
        })
    }

    /// The earliest failure under [`Mode::FirstFailure`].
    pub fn first_failure(&self) -> Option<(usize, &F)> {
        if self.mode != Mode::FirstFailure {
            return None;
        }
        let id = self.decisive?;
        self.completed.iter().find_map(|(i, r)| match r {
            Err(f) if *i == id => Some((id, f)),
            _ => None,
        })
    }

    pub fn into_completed(self) -> Vec<(usize, Result<S, F>)> {
        self.completed
    }
}

fn decides<S, F>(mode: Mode, r: &Result<S, F>) -> bool {
    match mode {
        Mode::WaitAll => false,
        Mode::FirstSuccess => r.is_ok(),
        Mode::FirstFailure => r.is_err(),
    }
}

/// Run `jobs` with at most `limit` in flight.
pub async fn run<'a, S, F>(mode: Mode, jobs: Vec<Job<'a, S, F>>, limit: usize) -> PoolOutcome<S, F>
where
    S: Send + 'a,
    F: Send + 'a,
{
    assert!(limit >= 1, "pool limit must be at least 1");
    let origin = Instant::now();
    let tick = || origin.elapsed().as_millis() as u64;
    let mut events = Vec::new();
    let mut queue: VecDeque<(usize, Job<'a, S, F>)> = jobs.into_iter().enumerate().collect();
    let mut hooks: Vec<(usize, Option<CancelHook<'a>>)> = Vec::new();
    let mut running = FuturesUnordered::new();
    let mut completed = Vec::new();
    let mut decisive = None;

    let refill = |running: &mut FuturesUnordered<BoxFuture<'a, (usize, Result<S, F>)>>,
                      queue: &mut VecDeque<(usize, Job<'a, S, F>)>,
                      hooks: &mut Vec<(usize, Option<CancelHook<'a>>)>,
                      events: &mut Vec<PoolEvent>| {
        while running.len() < limit {
            let Some((id, job)) = queue.pop_front() else { break };
            events.push(PoolEvent {
                tick: tick(),
                job_id: id,
                event: EventKind::Start,
            });
            hooks.push((id, job.on_cancel));
            running.push(job.work.map(move |r| (id, r)).boxed());
        }
    };

    refill(&mut running, &mut queue, &mut hooks, &mut events);
    while let Some(first) = running.next().await {
        let mut batch = vec![first];
        while let Some(Some(more)) = running.next().now_or_never() {
            batch.push(more);
        }
        batch.sort_by_key(|(id, _)| *id);
        let now = tick();
        let mut late = Vec::new();
        for (id, r) in batch {
            if decisive.is_some() {
                late.push(id);
                continue;
            }
            hooks.retain(|(h, _)| *h != id);
            events.push(PoolEvent {
                tick: now,
                job_id: id,
                event: if r.is_ok() {
                    EventKind::Success
                } else {
                    EventKind::Failure
                },
            });
            if decides(mode, &r) {
                decisive = Some(id);
            }
            completed.push((id, r));
        }
        if decisive.is_some() {
            // Same-instant completions ordered after the decisive job are
            // discarded like any other unfinished job.
            drop(running);
            let mut cancelled = BTreeSet::new();
            let mut ids: Vec<usize> = hooks.iter().map(|(id, _)| *id).chain(late).collect();
            ids.extend(queue.iter().map(|(id, _)| *id));
            ids.sort_unstable();
            ids.dedup();
            let mut pending_hooks: Vec<(usize, CancelHook<'a>)> = hooks
                .into_iter()
                .filter_map(|(id, h)| h.map(|h| (id, h)))
                .chain(queue.into_iter().filter_map(|(id, j)| j.on_cancel.map(|h| (id, h))))
                .collect();
            pending_hooks.sort_by_key(|(id, _)| *id);
            for id in ids {
                events.push(PoolEvent {
                    tick: now,
                    job_id: id,
                    event: EventKind::Cancel,
                });
                cancelled.insert(id);
            }
            for (_, hook) in pending_hooks {
                hook();
            }
            return PoolOutcome {
                mode,
                completed,
                decisive,
                cancelled,
                events,
            };
        }
        refill(&mut running, &mut queue, &mut hooks, &mut events);
    }
    PoolOutcome {
        mode,
        completed,
        decisive,
        cancelled: BTreeSet::new(),
        events,
    }
}

pub async fn run_wait_all<'a, S: Send + 'a, F: Send + 'a>(
    jobs: Vec<Job<'a, S, F>>,
    limit: usize,
) -> PoolOutcome<S, F> {
    run(Mode::WaitAll, jobs, limit).await
}

pub async fn run_first_success<'a, S: Send + 'a, F: Send + 'a>(
    jobs: Vec<Job<'a, S, F>>,
    limit: usize,
) -> PoolOutcome<S, F> {
    run(Mode::FirstSuccess, jobs, limit).await
}

pub async fn run_first_failure<'a, S: Send + 'a, F: Send + 'a>(
    jobs: Vec<Job<'a, S, F>>,
    limit: usize,
) -> PoolOutcome<S, F> {
    run(Mode::FirstFailure, jobs, limit).await
}

/// A scripted job for the simulator: runs `duration` ticks, then succeeds or fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimJob {
    pub duration: u64,
    pub succeeds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimOutcome {
    pub completed: Vec<(usize, bool)>,
    pub decisive: Option<usize>,
    pub cancelled: BTreeSet<usize>,
    pub events: Vec<PoolEvent>,
    /// Tick at which the pool returned.
    pub makespan: u64,
    /// Largest number of jobs running at once.
    pub peak_running: usize,
}

/// Discrete-event model of [`run`] under simulated time.
pub fn simulate(mode: Mode, jobs: &[SimJob], limit: usize) -> SimOutcome {
    assert!(limit >= 1, "pool limit must be at least 1");
    let mut t = 0u64;
    let mut next = 0usize;
    let mut running: Vec<(usize, u64)> = Vec::new();
    let mut events = Vec::new();
    let mut completed = Vec::new();
    let mut decisive = None;
    let mut cancelled = BTreeSet::new();
    let mut peak = 0;

    let start = |t: u64, next: &mut usize, running: &mut Vec<(usize, u64)>, events: &mut Vec<PoolEvent>| {
        while running.len() < limit && *next < jobs.len() {
            running.push((*next, t + jobs[*next].duration));
            events.push(PoolEvent {
                tick: t,
                job_id: *next,
                event: EventKind::Start,
            });
            *next += 1;
        }
    };

    start(t, &mut next, &mut running, &mut events);
    peak = peak.max(running.len());
    while let Some(tmin) = running.iter().map(|(_, f)| *f).min() {
        t = tmin;
        let mut batch: Vec<usize> = running.iter().filter(|(_, f)| *f == t).map(|(id, _)| *id).collect();
        batch.sort_unstable();
        running.retain(|(_, f)| *f != t);
        for id in batch {
            if decisive.is_some() {
                cancelled.insert(id);
                continue;
            }
            let ok = jobs[id].succeeds;
            events.push(PoolEvent {
                tick: t,
                job_id: id,
                event: if ok { EventKind::Success } else { EventKind::Failure },
            });
            completed.push((id, ok));
            let r: Result<(), ()> = if ok { Ok(()) } else { Err(()) };
            if decides(mode, &r) {
                decisive = Some(id);
            }
        }
        if decisive.is_some() {
            cancelled.extend(running.iter().map(|(id, _)| *id));
            cancelled.extend(next..jobs.len());
            for id in &cancelled {
                events.push(PoolEvent {
                    tick: t,
                    job_id: *id,
                    event: EventKind::Cancel,
                });
            }
            break;
        }
        start(t, &mut next, &mut running, &mut events);
        peak = peak.max(running.len());
    }
    SimOutcome {
        completed,
        decisive,
        cancelled,
        events,
        makespan: t,
        peak_running: peak,
    }
}
