//! In-process topic logs.
//!
//! A [`TopicLog`] is a single-partition, append-only sequence of entries. The
//! broker stamps each entry with an ingestion time read from the caller's
//! clock while holding the topic's write lock, so offsets and timestamps agree
//! on one total order per topic. Ingestion times never decrease within a
//! topic: a clock reading older than the tail is raised to the tail's time.
//!
//! On disk every topic is one `<name>.log` file of frames
//! `u32 payload length | u64 ingestion ms | payload`, all little-endian.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use bytes::Bytes;
use parking_lot::RwLock;
use thiserror::Error;

use crate::clock::Clock;

const LOG_EXTENSION: &str = "log";

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("topic {0:?} already exists")]
    DuplicateTopic(String),
    #[error("topic {0:?} does not exist")]
    UnknownTopic(String),
    #[error("offset {offset} beyond end of topic {topic:?} (length {len})")]
    OffsetOutOfRange { topic: String, offset: u64, len: u64 },
    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt log file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> BrokerError + '_ {
    move |source| BrokerError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub offset: u64,
    pub ingestion_ts: i64,
    pub payload: Bytes,
}

impl Entry {
    /// Payload as UTF-8 text; every harness payload is a CSV line.
    pub fn text(&self) -> Option<&str> {
        std::str::from_utf8(&self.payload).ok()
    }
}

#[derive(Debug)]
pub struct TopicLog {
    name: String,
    entries: RwLock<Vec<Entry>>,
    finished: AtomicBool,
}

impl TopicLog {
    fn new(name: String, entries: Vec<Entry>) -> Self {
        Self {
            name,
            entries: RwLock::new(entries),
            finished: AtomicBool::new(false),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> u64 {
        self.entries.read().len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends one entry stamped with `clock` and returns its offset.
    pub fn append(&self, payload: impl Into<Bytes>, clock: &dyn Clock) -> u64 {
        let payload = payload.into();
        let mut entries = self.entries.write();
        let now = clock.now_ms();
        let ingestion_ts = entries.last().map_or(now, |e| now.max(e.ingestion_ts));
        let offset = entries.len() as u64;
        entries.push(Entry {
            offset,
            ingestion_ts,
            payload,
        });
        offset
    }

    /// Up to `max` entries starting at `offset`, in offset order.
    pub fn read_from(&self, offset: u64, max: usize) -> Result<Vec<Entry>, BrokerError> {
        let entries = self.entries.read();
        let len = entries.len() as u64;
        if offset > len {
            return Err(BrokerError::OffsetOutOfRange {
                topic: self.name.clone(),
                offset,
                len,
            });
        }
        let start = offset as usize;
        let end = start.saturating_add(max).min(entries.len());
        Ok(entries[start..end].to_vec())
    }

    pub fn get(&self, offset: u64) -> Option<Entry> {
        self.entries.read().get(offset as usize).cloned()
    }

    /// Every entry, in offset order.
    pub fn snapshot(&self) -> Vec<Entry> {
        self.entries.read().clone()
    }

    /// Marks that no producer will append to this topic any more.
    pub fn mark_finished(&self) {
        self.finished.store(true, Ordering::Release);
    }

    pub fn is_finished(&self) -> bool {
        self.finished.load(Ordering::Acquire)
    }

    fn write_to(&self, path: &Path) -> Result<(), BrokerError> {
        let file = File::create(path).map_err(storage(path))?;
        let mut out = BufWriter::new(file);
        for e in self.entries.read().iter() {
            let len = u32::try_from(e.payload.len()).map_err(|_| BrokerError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("payload at offset {} exceeds u32 length", e.offset),
            })?;
            out.write_all(&len.to_le_bytes()).map_err(storage(path))?;
            out.write_all(&(e.ingestion_ts as u64).to_le_bytes())
                .map_err(storage(path))?;
            out.write_all(&e.payload).map_err(storage(path))?;
        }
        out.flush().map_err(storage(path))
    }

    fn read_file(name: String, path: &Path) -> Result<Self, BrokerError> {
        let file = File::open(path).map_err(storage(path))?;
        let mut input = BufReader::new(file);
        let mut entries = Vec::new();
        let mut header = [0u8; 12];
        loop {
            match read_exact_or_eof(&mut input, &mut header).map_err(storage(path))? {
                ReadOutcome::Eof => break,
                ReadOutcome::Partial => {
                    return Err(BrokerError::Corrupt {
                        path: path.to_path_buf(),
                        reason: format!("truncated frame header after offset {}", entries.len()),
                    })
                }
                ReadOutcome::Full => {}
            }
            let len = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
            let ts = u64::from_le_bytes(header[4..12].try_into().unwrap()) as i64;
            let mut payload = vec![0u8; len];
            input.read_exact(&mut payload).map_err(|_| BrokerError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("truncated payload at offset {}", entries.len()),
            })?;
            entries.push(Entry {
                offset: entries.len() as u64,
                ingestion_ts: ts,
                payload: Bytes::from(payload),
            });
        }
        Ok(Self::new(name, entries))
    }
}

enum ReadOutcome {
    Full,
    Partial,
    Eof,
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> io::Result<ReadOutcome> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Ok(if filled == 0 {
                    ReadOutcome::Eof
                } else {
                    ReadOutcome::Partial
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ReadOutcome::Full)
}

/// Named topic logs shared by producers and consumers.
#[derive(Debug, Default)]
pub struct TopicCatalog {
    topics: RwLock<BTreeMap<String, Arc<TopicLog>>>,
}

impl TopicCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_topic(&self, name: &str) -> Result<Arc<TopicLog>, BrokerError> {
        let mut topics = self.topics.write();
        if topics.contains_key(name) {
            return Err(BrokerError::DuplicateTopic(name.to_string()));
        }
        let log = Arc::new(TopicLog::new(name.to_string(), Vec::new()));
        topics.insert(name.to_string(), Arc::clone(&log));
        Ok(log)
    }

    pub fn topic(&self, name: &str) -> Result<Arc<TopicLog>, BrokerError> {
        self.topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.topics.read().contains_key(name)
    }

    /// Topic names in lexicographic order.
    pub fn names(&self) -> Vec<String> {
        self.topics.read().keys().cloned().collect()
    }

    pub fn persist(&self, dir: &Path) -> Result<Vec<PathBuf>, BrokerError> {
        fs::create_dir_all(dir).map_err(storage(dir))?;
        let topics = self.topics.read();
        let mut written = Vec::with_capacity(topics.len());
        for (name, log) in topics.iter() {
            let path = dir.join(format!("{name}.{LOG_EXTENSION}"));
            log.write_to(&path)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Loads every `*.log` file in `dir`. Loaded topics are marked finished.
    pub fn load(dir: &Path) -> Result<Self, BrokerError> {
        let catalog = Self::new();
        let mut topics = BTreeMap::new();
        for item in fs::read_dir(dir).map_err(storage(dir))? {
            let path = item.map_err(storage(dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(LOG_EXTENSION) {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let log = TopicLog::read_file(name.to_string(), &path)?;
            log.mark_finished();
            topics.insert(name.to_string(), Arc::new(log));
        }
        *catalog.topics.write() = topics;
        Ok(catalog)
    }
}

/// Topic naming convention `{prefix}-{run_id}-{stream}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicNames {
    pub prefix: String,
    pub run_id: String,
}

impl TopicNames {
    pub fn new(prefix: impl Into<String>, run_id: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            run_id: run_id.into(),
        }
    }

    pub fn stream(&self, stream: &str) -> String {
        format!("{}-{}-{}", self.prefix, self.run_id, stream)
    }

    pub fn sensor1(&self) -> String {
        self.stream("sensor1")
    }

    pub fn sensor2(&self) -> String {
        self.stream("sensor2")
    }

    pub fn times(&self) -> String {
        self.stream("times")
    }

    /// Result topic of query `n` (`q{n}-out`).
    pub fn output(&self, query: u8) -> String {
        self.stream(&format!("q{query}-out"))
    }

    /// Companion topic holding the latency anchor of each result entry.
    pub fn anchors(&self, query: u8) -> String {
        self.stream(&format!("q{query}-anchor"))
    }
}
