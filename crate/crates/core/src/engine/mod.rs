//! Reference streaming engine.
//!
//! Every selected query runs on its own thread and consumes its input topics
//! from offset 0 until the producers have finished and every appended entry
//! has been processed. Q4 reads both sensor topics; their entries are merged
//! in `(ingestion_ts, topic position, offset)` order, which is deterministic
//! no matter how the two topics were interleaved in wall time.
//!
//! With [`ClockMode::Logical`] a result is stamped with the ingestion time of
//! the entry that triggered it, so output logs do not depend on scheduling.

mod queries;
pub mod sos;

use std::collections::{BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{BrokerError, Entry, TopicCatalog, TopicLog, TopicNames};
use crate::clock::{Clock, ClockMode, ManualClock};
use crate::model::{InputRef, QueryId};
use crate::store::SharedDb;

pub use queries::{
    format_probability, q1_check_sensors, q2_outliers, q3_identify_errors, q4_check_power,
    q5_persist_times, CountWindowOutliers, DegenerateWindow, Emitter, ErrorFilter, Input,
    Operator, PersistTimes, PowerCheck, TumblingStats,
};
pub use sos::SosParams;

const READ_BATCH: usize = 1024;
const IDLE_WAIT: Duration = Duration::from_micros(200);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("worker for {0} panicked")]
    WorkerPanic(QueryId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub queries: BTreeSet<QueryId>,
    pub sos: SosParams,
    pub window_ms: i64,
    pub count_window: usize,
    pub clock_mode: ClockMode,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            queries: QueryId::ALL.into_iter().collect(),
            sos: SosParams::default(),
            window_ms: 1_000,
            count_window: 500,
            clock_mode: ClockMode::Logical,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.window_ms < 1 {
            return Err(EngineError::Config("window_ms must be at least 1".into()));
        }
        if self.count_window < 2 {
            return Err(EngineError::Config("count window needs at least 2 records".into()));
        }
        if self.queries.contains(&q(2)) {
            self.sos
                .validate(self.count_window)
                .map_err(EngineError::Config)?;
        }
        Ok(())
    }
}

fn q(n: u8) -> QueryId {
    QueryId::new(n).expect("static query id")
}

/// Input topics of a query, in merge-priority order.
pub fn query_inputs(query: QueryId, names: &TopicNames) -> Vec<String> {
    match query.get() {
        1..=3 => vec![names.sensor1()],
        4 => vec![names.sensor1(), names.sensor2()],
        _ => vec![names.times()],
    }
}

/// Whether a query writes result topics (Q5 writes to the store instead).
pub fn has_result_topic(query: QueryId) -> bool {
    query.get() <= 4
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    pub query: u8,
    pub inputs: u64,
    pub outputs: u64,
    pub dead_letters: u64,
    pub degenerate_windows: u64,
    pub late_records: u64,
    /// Offsets consumed per input topic at shutdown.
    pub consumed: Vec<(String, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineSummary {
    pub queries: Vec<QueryStats>,
    /// Every selected query consumed every offset of its inputs.
    pub drained: bool,
}

impl EngineSummary {
    pub fn stats(&self, query: QueryId) -> Option<&QueryStats> {
        self.queries.iter().find(|s| s.query == query.get())
    }
}

struct Cursor {
    log: Arc<TopicLog>,
    next: u64,
    buffered: VecDeque<Entry>,
    last_ts: Option<i64>,
    consumed: Arc<AtomicU64>,
}

impl Cursor {
    fn refill(&mut self) -> Result<(), BrokerError> {
        if self.buffered.is_empty() {
            let batch = self.log.read_from(self.next, READ_BATCH)?;
            self.next += batch.len() as u64;
            self.buffered.extend(batch);
        }
        Ok(())
    }

    /// No entry will ever be available again.
    fn exhausted(&self) -> bool {
        // read the flag before the length: an append that precedes the flag is visible
        self.buffered.is_empty() && self.log.is_finished() && self.next == self.log.len()
    }
}

enum Next {
    Entry(usize, Entry),
    Pending,
    Done,
}

/// Picks the next entry in merge order, or reports that none is safe yet.
fn next_entry(cursors: &mut [Cursor]) -> Result<Next, BrokerError> {
    for c in cursors.iter_mut() {
        c.refill()?;
    }
    let head = cursors
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.buffered.front().map(|e| (e.ingestion_ts, i)))
        .min();
    let Some((ts, i)) = head else {
        return Ok(if cursors.iter().all(Cursor::exhausted) {
            Next::Done
        } else {
            Next::Pending
        });
    };
    // an input with nothing buffered may still append an entry that sorts first
    let safe = cursors.iter().enumerate().all(|(j, c)| {
        j == i
            || !c.buffered.is_empty()
            || c.exhausted()
            || c.last_ts.is_some_and(|last| (last, j) > (ts, i))
    });
    if !safe {
        return Ok(Next::Pending);
    }
    let entry = cursors[i].buffered.pop_front().expect("head exists");
    cursors[i].last_ts = Some(entry.ingestion_ts);
    Ok(Next::Entry(i, entry))
}

struct Worker {
    query: QueryId,
    cursors: Vec<Cursor>,
    operator: Box<dyn Operator>,
    out: Option<Arc<TopicLog>>,
    anchors: Option<Arc<TopicLog>>,
    real_clock: Arc<dyn Clock>,
    mode: ClockMode,
}

impl Worker {
    fn run(mut self) -> Result<QueryStats, BrokerError> {
        let mut stats = QueryStats {
            query: self.query.get(),
            ..QueryStats::default()
        };
        let logical = ManualClock::new(0);
        loop {
            match next_entry(&mut self.cursors)? {
                Next::Entry(i, entry) => {
                    if self.mode == ClockMode::Logical {
                        logical.set(entry.ingestion_ts);
                    }
                    let clock: &dyn Clock = match self.mode {
                        ClockMode::Logical => &logical,
                        ClockMode::Real => &*self.real_clock,
                    };
                    let anchor = InputRef::new(self.cursors[i].log.name(), entry.offset);
                    let line = entry.text().unwrap_or_default();
                    let mut emitter = Emitter {
                        out: self.out.as_deref(),
                        anchors: self.anchors.as_deref(),
                        clock,
                        stats: &mut stats,
                    };
                    if entry.text().is_none() {
                        emitter.dead_letter();
                    } else {
                        self.operator.on_input(Input { line, anchor }, &mut emitter);
                    }
                    stats.inputs += 1;
                    self.cursors[i]
                        .consumed
                        .store(entry.offset + 1, Ordering::Release);
                }
                Next::Pending => thread::sleep(IDLE_WAIT),
                Next::Done => break,
            }
        }
        let clock: &dyn Clock = match self.mode {
            ClockMode::Logical => &logical,
            ClockMode::Real => &*self.real_clock,
        };
        let mut emitter = Emitter {
            out: self.out.as_deref(),
            anchors: self.anchors.as_deref(),
            clock,
            stats: &mut stats,
        };
        self.operator.finish(&mut emitter);
        stats.consumed = self
            .cursors
            .iter()
            .map(|c| (c.log.name().to_string(), c.consumed.load(Ordering::Acquire)))
            .collect();
        Ok(stats)
    }
}

struct Progress {
    query: QueryId,
    inputs: Vec<(Arc<TopicLog>, Arc<AtomicU64>)>,
}

/// A running engine.
pub struct EngineHandle {
    workers: Vec<(QueryId, JoinHandle<Result<QueryStats, BrokerError>>)>,
    progress: Vec<Progress>,
}

impl EngineHandle {
    /// Appended but not yet consumed entries, summed over queries and inputs.
    pub fn backlog(&self) -> u64 {
        self.progress
            .iter()
            .flat_map(|p| p.inputs.iter())
            .map(|(log, consumed)| log.len().saturating_sub(consumed.load(Ordering::Acquire)))
            .sum()
    }

    /// Consumed offsets per query and input topic.
    pub fn consumed(&self) -> Vec<(QueryId, Vec<(String, u64)>)> {
        self.progress
            .iter()
            .map(|p| {
                (
                    p.query,
                    p.inputs
                        .iter()
                        .map(|(log, c)| (log.name().to_string(), c.load(Ordering::Acquire)))
                        .collect(),
                )
            })
            .collect()
    }

    pub fn join(self) -> Result<EngineSummary, EngineError> {
        let mut queries = Vec::new();
        for (query, worker) in self.workers {
            let stats = worker
                .join()
                .map_err(|_| EngineError::WorkerPanic(query))??;
            queries.push(stats);
        }
        let drained = self.progress.iter().all(|p| {
            p.inputs
                .iter()
                .all(|(log, c)| c.load(Ordering::Acquire) == log.len())
        });
        Ok(EngineSummary { queries, drained })
    }
}

/// Starts one consumer thread per selected query. Input and result topics must exist.
pub fn spawn(
    cfg: &EngineConfig,
    catalog: &TopicCatalog,
    names: &TopicNames,
    db: SharedDb,
    clock: Arc<dyn Clock>,
) -> Result<EngineHandle, EngineError> {
    cfg.validate()?;
    let mut pending = Vec::new();
    for &query in &cfg.queries {
        let mut cursors = Vec::new();
        for topic in query_inputs(query, names) {
            cursors.push(Cursor {
                log: catalog.topic(&topic)?,
                next: 0,
                buffered: VecDeque::new(),
                last_ts: None,
                consumed: Arc::new(AtomicU64::new(0)),
            });
        }
        let (out, anchors) = if has_result_topic(query) {
            (
                Some(catalog.topic(&names.output(query.get()))?),
                Some(catalog.topic(&names.anchors(query.get()))?),
            )
        } else {
            (None, None)
        };
        let operator: Box<dyn Operator> = match query.get() {
            1 => Box::new(TumblingStats::new(cfg.window_ms)),
            2 => Box::new(CountWindowOutliers::new(cfg.count_window, cfg.sos)),
            3 => Box::new(ErrorFilter),
            4 => Box::new(PowerCheck::new(Arc::clone(&db))),
            _ => Box::new(PersistTimes::new(Arc::clone(&db))),
        };
        pending.push(Worker {
            query,
            cursors,
            operator,
            out,
            anchors,
            real_clock: Arc::clone(&clock),
            mode: cfg.clock_mode,
        });
    }
    let mut handle = EngineHandle {
        workers: Vec::new(),
        progress: Vec::new(),
    };
    for worker in pending {
        handle.progress.push(Progress {
            query: worker.query,
            inputs: worker
                .cursors
                .iter()
                .map(|c| (Arc::clone(&c.log), Arc::clone(&c.consumed)))
                .collect(),
        });
        let query = worker.query;
        let join = thread::Builder::new()
            .name(format!("engine-{query}"))
            .spawn(move || worker.run())
            .map_err(|e| EngineError::Config(format!("cannot start worker: {e}")))?;
        handle.workers.push((query, join));
    }
    Ok(handle)
}

/// Runs the selected queries until their inputs are finished and drained.
pub fn run_queries(
    cfg: &EngineConfig,
    catalog: &TopicCatalog,
    names: &TopicNames,
    db: SharedDb,
    clock: Arc<dyn Clock>,
) -> Result<EngineSummary, EngineError> {
    spawn(cfg, catalog, names, db, clock)?.join()
}

/// Creates every topic the engine reads or writes for `queries`, skipping existing ones.
pub fn create_topics(
    catalog: &TopicCatalog,
    names: &TopicNames,
    queries: &BTreeSet<QueryId>,
) -> Result<(), BrokerError> {
    let mut wanted = Vec::new();
    for &query in queries {
        wanted.extend(query_inputs(query, names));
        if has_result_topic(query) {
            wanted.push(names.output(query.get()));
            wanted.push(names.anchors(query.get()));
        }
    }
    for topic in wanted {
        if !catalog.contains(&topic) {
            catalog.create_topic(&topic)?;
        }
    }
    Ok(())
}
