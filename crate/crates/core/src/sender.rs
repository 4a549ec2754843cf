//! Data sender: business data import and paced stream publication.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{TopicCatalog, TopicLog};
use crate::clock::{Clock, ClockMode, ManualClock};
use crate::store::{BusinessDb, StoreError, Table};

const SPIN_THRESHOLD: Duration = Duration::from_micros(200);

#[derive(Debug, Error)]
pub enum SenderError {
    #[error("invalid sender configuration: {0}")]
    Config(String),
    #[error("topic {0} does not exist")]
    TopicMissing(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("sender thread for {0} panicked")]
    Panic(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenderConfig {
    /// Records per second and stream.
    pub input_rate: u32,
    pub duration_s: u64,
    pub clock_mode: ClockMode,
    /// Ingestion time of the first record of every stream in logical mode.
    pub base_ts: i64,
}

impl SenderConfig {
    pub fn validate(&self) -> Result<(), SenderError> {
        if self.input_rate < 1 {
            return Err(SenderError::Config("input_rate must be at least 1".into()));
        }
        if self.duration_s < 1 {
            return Err(SenderError::Config("duration must be at least 1 s".into()));
        }
        Ok(())
    }

    /// Upper bound on records sent per stream.
    pub fn max_records(&self) -> u64 {
        self.input_rate as u64 * self.duration_s
    }

    /// Logical ingestion time of the `k`-th record of a stream.
    pub fn logical_ts(&self, k: u64) -> i64 {
        self.base_ts + (k as i128 * 1000 / self.input_rate as i128) as i64
    }
}

/// A stream file and the topic it is published to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSpec {
    pub path: PathBuf,
    pub topic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub topic: String,
    pub sent: u64,
    /// Records per second between the first and the last ingestion time.
    pub achieved_rate: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SendSummary {
    pub streams: Vec<StreamSummary>,
    pub wall_time_s: f64,
}

impl SendSummary {
    pub fn sent(&self, topic: &str) -> Option<u64> {
        self.streams.iter().find(|s| s.topic == topic).map(|s| s.sent)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("summary serializes")
    }
}

/// Imports `<TABLE>.csv` files from `dir` in dependency order.
pub fn import_business(db: &mut BusinessDb, dir: &Path) -> Result<Vec<(Table, usize)>, SenderError> {
    let mut counts = Vec::new();
    for table in Table::ALL {
        let path = dir.join(table.file_name());
        let csv = fs::read_to_string(&path).map_err(|source| StoreError::Storage {
            what: table.name().to_string(),
            path: path.clone(),
            source,
        })?;
        counts.push((table, db.import_csv(table, &csv)?));
    }
    Ok(counts)
}

/// Paces sends to a constant rate, tolerating about a millisecond of catch-up.
pub struct TokenBucket {
    interval: Duration,
    capacity: u32,
    next_due: Instant,
}

impl TokenBucket {
    pub fn new(rate: u32, start: Instant) -> Self {
        let rate = rate.max(1);
        Self {
            interval: Duration::from_secs(1) / rate,
            capacity: (rate / 1000).max(1),
            next_due: start,
        }
    }

    /// Blocks until the next token is available and takes it.
    pub fn acquire(&mut self) {
        let now = Instant::now();
        let backlog = self.interval * self.capacity;
        if now > self.next_due + backlog {
            self.next_due = now - backlog;
        }
        loop {
            let now = Instant::now();
            if now >= self.next_due {
                break;
            }
            let left = self.next_due - now;
            if left > SPIN_THRESHOLD {
                thread::sleep(left - SPIN_THRESHOLD / 2);
            } else {
                thread::yield_now();
            }
        }
        self.next_due += self.interval;
    }
}

fn send_one(
    cfg: &SenderConfig,
    spec: &StreamSpec,
    log: &TopicLog,
    clock: &dyn Clock,
) -> Result<StreamSummary, SenderError> {
    let io_err = |source| SenderError::Io {
        path: spec.path.clone(),
        source,
    };
    let reader = BufReader::new(File::open(&spec.path).map_err(io_err)?);
    let started = Instant::now();
    let logical = ManualClock::new(cfg.base_ts);
    let mut bucket = TokenBucket::new(cfg.input_rate, started);
    let mut sent = 0u64;
    let mut first_ts = None;
    let mut last_ts = 0;
    let result: Result<(), SenderError> = (|| {
        for line in reader.lines() {
            if sent == cfg.max_records() {
                break;
            }
            let line = line.map_err(io_err)?;
            let offset = match cfg.clock_mode {
                ClockMode::Logical => {
                    logical.set(cfg.logical_ts(sent));
                    log.append(line, &logical)
                }
                ClockMode::Real => {
                    bucket.acquire();
                    log.append(line, clock)
                }
            };
            let ts = log.get(offset).map_or(0, |e| e.ingestion_ts);
            first_ts.get_or_insert(ts);
            last_ts = ts;
            sent += 1;
        }
        Ok(())
    })();
    // consumers must not wait for a stream that ended on an error
    log.mark_finished();
    result?;
    let achieved_rate = match first_ts {
        Some(first) if last_ts > first => Some((sent - 1) as f64 * 1000.0 / (last_ts - first) as f64),
        _ => None,
    };
    Ok(StreamSummary {
        topic: spec.topic.clone(),
        sent,
        achieved_rate,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Publishes every stream on its own thread and marks each topic finished when done.
pub fn stream(
    cfg: &SenderConfig,
    streams: &[StreamSpec],
    catalog: &TopicCatalog,
    clock: Arc<dyn Clock>,
) -> Result<SendSummary, SenderError> {
    cfg.validate()?;
    let logs = streams
        .iter()
        .map(|s| catalog.topic(&s.topic).map_err(|_| SenderError::TopicMissing(s.topic.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let started = Instant::now();
    let results: Vec<Result<StreamSummary, SenderError>> = thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .zip(&logs)
            .map(|(spec, log)| {
                let clock = Arc::clone(&clock);
                scope.spawn(move || send_one(cfg, spec, log, &*clock))
            })
            .collect();
        handles
            .into_iter()
            .zip(streams)
            .map(|(h, spec)| h.join().unwrap_or_else(|_| Err(SenderError::Panic(spec.topic.clone()))))
            .collect()
    });
    Ok(SendSummary {
        streams: results.into_iter().collect::<Result<_, _>>()?,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
