//! Benchmark orchestration: configuration, run directory and the pipeline commands.
//!
//! A run directory holds everything a run produced:
//!
//! ```text
//! config.snapshot      effective configuration (flat key = value)
//! business/            generated business tables
//! streams/             generated sensor1, sensor2 and times streams
//! topics/              persisted broker logs
//! db-snapshot/pre/     store before the run
//! db-snapshot/post/    store after the run, with row update times
//! results/             latency CSVs and validation summaries
//! sysload.csv          process CPU time and resident memory samples
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{BrokerError, TopicCatalog, TopicNames};
use crate::clock::{Clock, ClockMode, SystemClock};
use crate::datagen::{self, GenConfig, GenError};
use crate::engine::{self, EngineConfig, EngineError, EngineSummary, SosParams};
use crate::model::QueryId;
use crate::sender::{self, SendSummary, SenderConfig, SenderError, StreamSpec};
use crate::store::{BusinessDb, StoreError};
use crate::validator::{self, ValidationReport, ValidatorConfig, ValidatorError, Verdict};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{0} already exists (use --force to overwrite)")]
    RunExists(PathBuf),
    #[error("cannot access {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Sender(#[from] SenderError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Validator(#[from] ValidatorError),
    #[error("queries did not drain their inputs: {0}")]
    NotDrained(String),
}

impl HarnessError {
    /// Process exit code of the failure class. 1 is reserved for a FAIL verdict.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Sender(SenderError::Config(_)) => 2,
            HarnessError::Engine(EngineError::Config(_)) => 2,
            HarnessError::Gen(GenError::InvalidConfig(_)) => 2,
            HarnessError::MissingInput(_) | HarnessError::Validator(ValidatorError::MissingTopic(_)) => 3,
            HarnessError::RunExists(_) => 4,
            HarnessError::Storage { .. }
            | HarnessError::Gen(GenError::Io { .. })
            | HarnessError::Store(StoreError::Storage { .. })
            | HarnessError::Broker(BrokerError::Storage { .. })
            | HarnessError::Sender(SenderError::Io { .. })
            | HarnessError::Validator(ValidatorError::Storage { .. }) => 5,
            HarnessError::Gen(_)
            | HarnessError::Store(_)
            | HarnessError::Broker(_)
            | HarnessError::Sender(_)
            | HarnessError::Validator(_) => 6,
            HarnessError::Engine(_) | HarnessError::NotDrained(_) => 7,
        }
    }
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Storage {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub scale_factor: u32,
    pub input_rate: u32,
    pub duration_s: u64,
    pub queries: BTreeSet<QueryId>,
    pub clock: ClockMode,
    pub topic_prefix: String,
    pub output_dir: PathBuf,
    pub sos: SosParams,
    pub window_ms: i64,
    pub count_window: usize,
    pub sampling: bool,
    pub sampling_interval_ms: u64,
    pub start_ts_ms: i64,
    pub error_rate_mf01: f64,
    pub low_rate_mf03: f64,
    pub downtime_fraction: f64,
    pub times_lines: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        Self {
            run_id: "r1".into(),
            seed: gen.seed,
            scale_factor: gen.scale_factor,
            input_rate: 1_000,
            duration_s: 60,
            queries: QueryId::ALL.into_iter().collect(),
            clock: ClockMode::Logical,
            topic_prefix: "esp".into(),
            output_dir: PathBuf::from("runs"),
            sos: SosParams::default(),
            window_ms: 1_000,
            count_window: 500,
            sampling: true,
            sampling_interval_ms: 1_000,
            start_ts_ms: gen.start_ts_ms,
            error_rate_mf01: gen.error_rate_mf01,
            low_rate_mf03: gen.low_rate_mf03,
            downtime_fraction: gen.downtime_fraction,
            times_lines: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: invalid value {value:?}")))
}

fn safe_name(key: &str, value: &str) -> Result<String, HarnessError> {
    let ok = !value.is_empty()
        && value
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(value.to_string())
    } else {
        Err(HarnessError::Config(format!(
            "{key} must be non-empty and use only letters, digits, '-' and '_': {value:?}"
        )))
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let value = value.trim();
        match key.trim() {
            "run_id" => self.run_id = safe_name(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "scale_factor" => self.scale_factor = parse(key, value)?,
            "input_rate" => self.input_rate = parse(key, value)?,
            "duration_s" => self.duration_s = parse(key, value)?,
            "queries" => {
                self.queries = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.parse().map_err(HarnessError::Config))
                    .collect::<Result<_, _>>()?
            }
            "clock" => self.clock = value.parse().map_err(HarnessError::Config)?,
            "topic_prefix" => self.topic_prefix = safe_name(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "sos_perplexity" => self.sos.perplexity = parse(key, value)?,
            "sos_tolerance" => self.sos.tolerance = parse(key, value)?,
            "sos_max_iterations" => self.sos.max_iterations = parse(key, value)?,
            "window_ms" => self.window_ms = parse(key, value)?,
            "count_window" => self.count_window = parse(key, value)?,
            "sampling" => self.sampling = parse(key, value)?,
            "sampling_interval_ms" => self.sampling_interval_ms = parse(key, value)?,
            "start_ts_ms" => self.start_ts_ms = parse(key, value)?,
            "error_rate_mf01" => self.error_rate_mf01 = parse(key, value)?,
            "low_rate_mf03" => self.low_rate_mf03 = parse(key, value)?,
            "downtime_fraction" => self.downtime_fraction = parse(key, value)?,
            "times_lines" => {
                self.times_lines = match value {
                    "all" => None,
                    n => Some(parse(key, n)?),
                }
            }
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), HarnessError> {
        for o in overrides {
            let (key, value) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(storage(path))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key except `output_dir`, one per line in a fixed order.
    pub fn snapshot(&self) -> String {
        let queries: Vec<String> = self.queries.iter().map(|q| q.get().to_string()).collect();
        let times_lines = self.times_lines.map_or("all".to_string(), |n| n.to_string());
        let pairs: [(&str, String); 20] = [
            ("run_id", self.run_id.clone()),
            ("seed", self.seed.to_string()),
            ("scale_factor", self.scale_factor.to_string()),
            ("input_rate", self.input_rate.to_string()),
            ("duration_s", self.duration_s.to_string()),
            ("queries", queries.join(",")),
            ("clock", self.clock.to_string()),
            ("topic_prefix", self.topic_prefix.clone()),
            ("sos_perplexity", self.sos.perplexity.to_string()),
            ("sos_tolerance", self.sos.tolerance.to_string()),
            ("sos_max_iterations", self.sos.max_iterations.to_string()),
            ("window_ms", self.window_ms.to_string()),
            ("count_window", self.count_window.to_string()),
            ("sampling", self.sampling.to_string()),
            ("sampling_interval_ms", self.sampling_interval_ms.to_string()),
            ("start_ts_ms", self.start_ts_ms.to_string()),
            ("error_rate_mf01", self.error_rate_mf01.to_string()),
            ("low_rate_mf03", self.low_rate_mf03.to_string()),
            ("downtime_fraction", self.downtime_fraction.to_string()),
            ("times_lines", times_lines),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.duration_s < 1 {
            return Err(HarnessError::Config("duration_s must be at least 1".into()));
        }
        if self.input_rate < 1 {
            return Err(HarnessError::Config("input_rate must be at least 1".into()));
        }
        if self.sampling && self.sampling_interval_ms == 0 {
            return Err(HarnessError::Config("sampling_interval_ms must be at least 1".into()));
        }
        safe_name("run_id", &self.run_id)?;
        safe_name("topic_prefix", &self.topic_prefix)?;
        self.engine_config().validate()?;
        self.gen_config().validate()?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn topic_names(&self) -> TopicNames {
        TopicNames::new(&self.topic_prefix, &self.run_id)
    }

    /// Streams cover the configured duration at the input rate.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            scale_factor: self.scale_factor,
            sensor_count: self.input_rate as u64 * self.duration_s,
            sensor_rate: self.input_rate,
            start_ts_ms: self.start_ts_ms,
            error_rate_mf01: self.error_rate_mf01,
            low_rate_mf03: self.low_rate_mf03,
            downtime_fraction: self.downtime_fraction,
            times_lines: self.times_lines,
            ..GenConfig::default()
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            queries: self.queries.clone(),
            sos: self.sos,
            window_ms: self.window_ms,
            count_window: self.count_window,
            clock_mode: self.clock,
        }
    }

    /// Logical ingestion times coincide with the generated event times.
    pub fn sender_config(&self) -> SenderConfig {
        SenderConfig {
            input_rate: self.input_rate,
            duration_s: self.duration_s,
            clock_mode: self.clock,
            base_ts: self.start_ts_ms,
        }
    }

    pub fn validator_config(&self) -> ValidatorConfig {
        ValidatorConfig {
            sos: self.sos,
            window_ms: self.window_ms,
            count_window: self.count_window,
            clock_mode: self.clock,
            ..ValidatorConfig::default()
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn snapshot(&self) -> PathBuf {
        self.0.join("config.snapshot")
    }
    pub fn business(&self) -> PathBuf {
        self.0.join("business")
    }
    pub fn streams(&self) -> PathBuf {
        self.0.join("streams")
    }
    pub fn topics(&self) -> PathBuf {
        self.0.join("topics")
    }
    pub fn db_pre(&self) -> PathBuf {
        self.0.join("db-snapshot").join("pre")
    }
    pub fn db_post(&self) -> PathBuf {
        self.0.join("db-snapshot").join("post")
    }
    pub fn results(&self) -> PathBuf {
        self.0.join("results")
    }
    pub fn sysload(&self) -> PathBuf {
        self.0.join("sysload.csv")
    }
}

fn claim(path: &Path, force: bool) -> Result<(), HarnessError> {
    if !path.exists() {
        return Ok(());
    }
    if !force {
        return Err(HarnessError::RunExists(path.to_path_buf()));
    }
    let removed = if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    };
    removed.map_err(storage(path))
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(storage(parent))?;
    }
    fs::write(path, text).map_err(storage(path))
}

/// Generates business data and input streams into the run directory.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<RunDir, HarnessError> {
    cfg.validate()?;
    let dir = RunDir(cfg.run_dir());
    claim(&dir.business(), force)?;
    claim(&dir.streams(), force)?;
    datagen::generate_dataset(&cfg.gen_config(), &dir.0)?;
    write_file(&dir.snapshot(), &cfg.snapshot())?;
    Ok(dir)
}

/// Process CPU time and resident set size sampled on a background thread.
pub struct Sampler {
    stop: mpsc::Sender<()>,
    worker: thread::JoinHandle<String>,
    path: PathBuf,
}

fn proc_usage() -> Option<(u64, u64, u64)> {
    let stat = fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesised command name, starting at field 3
    let rest = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    let statm = fs::read_to_string("/proc/self/statm").ok()?;
    let rss_pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    // SAFETY: sysconf has no preconditions
    let (tick, page) = unsafe { (libc::sysconf(libc::_SC_CLK_TCK), libc::sysconf(libc::_SC_PAGESIZE)) };
    if tick <= 0 || page <= 0 {
        return None;
    }
    let ms = |t: u64| t * 1000 / tick as u64;
    Some((ms(utime), ms(stime), rss_pages * page as u64 / 1024))
}

impl Sampler {
    pub fn start(path: PathBuf, interval: Duration) -> Self {
        let (stop, stopped) = mpsc::channel::<()>();
        let worker = thread::spawn(move || {
            let started = Instant::now();
            let mut out = String::from("elapsed_ms,cpu_user_ms,cpu_system_ms,rss_kb\n");
            loop {
                if let Some((user, system, rss)) = proc_usage() {
                    let _ = writeln!(out, "{},{user},{system},{rss}", started.elapsed().as_millis());
                }
                match stopped.recv_timeout(interval) {
                    Err(mpsc::RecvTimeoutError::Timeout) => continue,
                    _ => break,
                }
            }
            out
        });
        Self { stop, worker, path }
    }

    pub fn finish(self) -> Result<(), HarnessError> {
        let _ = self.stop.send(());
        let text = self.worker.join().unwrap_or_default();
        write_file(&self.path, &text)
    }
}

/// What a benchmark run observed besides its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub engine: EngineSummary,
    pub sender: SendSummary,
    /// Largest appended-minus-consumed offset count seen while sending.
    pub max_backlog: u64,
    pub backlog_samples: u64,
    pub wall_time_s: f64,
}

const BACKLOG_POLL: Duration = Duration::from_millis(5);

/// Imports business data, streams the inputs through the engine and persists the logs.
pub fn cmd_run(cfg: &RunConfig, force: bool) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    if cfg.queries.is_empty() {
        return Err(HarnessError::Config("no queries selected".into()));
    }
    let dir = RunDir(cfg.run_dir());
    let names = cfg.topic_names();
    let mut specs = Vec::new();
    let needs = |n: &[u8]| cfg.queries.iter().any(|q| n.contains(&q.get()));
    let streams = [
        ("sensor1", names.sensor1(), needs(&[1, 2, 3, 4])),
        ("sensor2", names.sensor2(), needs(&[4])),
        ("times", names.times(), needs(&[5])),
    ];
    for (file, topic, used) in streams {
        let path = dir.streams().join(format!("{file}.csv"));
        if used {
            if !path.is_file() {
                return Err(HarnessError::MissingInput(format!(
                    "{} (run generate first)",
                    path.display()
                )));
            }
            specs.push(StreamSpec { path, topic });
        }
    }
    if !dir.business().is_dir() {
        return Err(HarnessError::MissingInput(format!(
            "{} (run generate first)",
            dir.business().display()
        )));
    }
    for p in [dir.topics(), dir.0.join("db-snapshot"), dir.results(), dir.sysload()] {
        claim(&p, force)?;
    }
    write_file(&dir.snapshot(), &cfg.snapshot())?;

    let catalog = TopicCatalog::new();
    engine::create_topics(&catalog, &names, &cfg.queries)?;
    let mut db = BusinessDb::new();
    sender::import_business(&mut db, &dir.business())?;
    db.write_dir(&dir.db_pre())?;
    let db = db.into_shared();

    let sampler = cfg
        .sampling
        .then(|| Sampler::start(dir.sysload(), Duration::from_millis(cfg.sampling_interval_ms)));
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let started = Instant::now();
    let handle = engine::spawn(&cfg.engine_config(), &catalog, &names, Arc::clone(&db), Arc::clone(&clock))?;
    let (sent, max_backlog, backlog_samples) = thread::scope(|scope| {
        let sending = scope.spawn(|| sender::stream(&cfg.sender_config(), &specs, &catalog, Arc::clone(&clock)));
        let (mut max, mut samples) = (0, 0u64);
        while !sending.is_finished() {
            max = max.max(handle.backlog());
            samples += 1;
            thread::sleep(BACKLOG_POLL);
        }
        let sent = sending
            .join()
            .unwrap_or_else(|_| Err(SenderError::Panic("sender".into())));
        (sent, max, samples)
    });
    let sent = match sent {
        Ok(s) => s,
        Err(e) => {
            // the engine terminates once every input topic is finished
            for spec in &specs {
                if let Ok(log) = catalog.topic(&spec.topic) {
                    log.mark_finished();
                }
            }
            let _ = handle.join();
            return Err(e.into());
        }
    };
    let summary = handle.join()?;
    let wall_time_s = started.elapsed().as_secs_f64();
    if let Some(s) = sampler {
        s.finish()?;
    }
    if !summary.drained {
        return Err(HarnessError::NotDrained(format!("{:?}", summary.queries)));
    }

    catalog.persist(&dir.topics())?;
    db.read().write_dir(&dir.db_post())?;
    let outcome = RunOutcome {
        engine: summary,
        sender: sent,
        max_backlog,
        backlog_samples,
        wall_time_s,
    };
    let engine_json = serde_json::to_string_pretty(&outcome.engine).expect("serializable") + "\n";
    write_file(&dir.0.join("engine-summary.json"), &engine_json)?;
    write_file(&dir.0.join("sender-summary.json"), &(outcome.sender.to_json_line() + "\n"))?;
    let run_json = serde_json::to_string_pretty(&outcome).expect("serializable") + "\n";
    write_file(&dir.0.join("run-summary.json"), &run_json)?;
    Ok(outcome)
}

/// Reads the configuration a run directory was produced with.
pub fn load_snapshot(run_dir: &Path) -> Result<RunConfig, HarnessError> {
    let dir = RunDir(run_dir.to_path_buf());
    if !dir.snapshot().is_file() {
        return Err(HarnessError::MissingInput(dir.snapshot().display().to_string()));
    }
    let mut cfg = RunConfig::from_file(&dir.snapshot())?;
    cfg.output_dir = run_dir.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(cfg)
}

/// Validates a finished run using only the contents of its directory.
pub fn cmd_validate(run_dir: &Path, force: bool) -> Result<ValidationReport, HarnessError> {
    let cfg = load_snapshot(run_dir)?;
    let dir = RunDir(run_dir.to_path_buf());
    for p in [dir.topics(), dir.db_pre(), dir.db_post()] {
        if !p.is_dir() {
            return Err(HarnessError::MissingInput(format!("{} (run the benchmark first)", p.display())));
        }
    }
    claim(&dir.results(), force)?;
    let catalog = TopicCatalog::load(&dir.topics())?;
    let pre = BusinessDb::read_dir(&dir.db_pre())?;
    let post = BusinessDb::read_dir(&dir.db_post())?;
    let (report, samples) = validator::validate_run(
        &cfg.validator_config(),
        &cfg.queries,
        &catalog,
        &cfg.topic_names(),
        &pre,
        &post,
    )?;
    validator::emit_reports(&report, &samples, &dir.results())?;
    Ok(report)
}

/// Renders the stored validation summary.
pub fn cmd_report(run_dir: &Path) -> Result<String, HarnessError> {
    let path = RunDir(run_dir.to_path_buf()).results().join("summary.json");
    if !path.is_file() {
        return Err(HarnessError::MissingInput(format!("{} (run validate first)", path.display())));
    }
    Ok(validator::render_text(&validator::read_summary(&path)?))
}

/// Generate, run, validate and report.
pub fn cmd_all(cfg: &RunConfig, force: bool) -> Result<(ValidationReport, RunOutcome), HarnessError> {
    let dir = cmd_generate(cfg, force)?;
    let outcome = cmd_run(cfg, force)?;
    let report = cmd_validate(&dir.0, force)?;
    Ok((report, outcome))
}

/// Exit code for a completed validation.
pub fn verdict_code(report: &ValidationReport) -> i32 {
    match report.verdict {
        Verdict::Pass => 0,
        Verdict::Fail => 1,
    }
}
