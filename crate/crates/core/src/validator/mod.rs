//! Result validation and latency calculation.
//!
//! Expected outputs are recomputed from the persisted input logs by code that
//! shares nothing with the engine except record parsing, then compared with
//! the engine's result topics element by element. Latencies are differences
//! between the ingestion time of a result and that of its anchor input.

pub mod dense;
pub mod oracle;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{TopicCatalog, TopicNames};
use crate::clock::ClockMode;
use crate::engine::SosParams;
use crate::model::{parse_production_time, InputRef, OrderLineKey, QueryId};
use crate::store::{BusinessDb, StoreError, Table};

pub use oracle::{round2, ExpectedRow, Field};

#[derive(Debug, Error)]
pub enum ValidatorError {
    #[error("topic {0} is missing")]
    MissingTopic(String),
    #[error("{query} result {position} has no resolvable input ({anchor})")]
    DanglingAnchor {
        query: QueryId,
        position: u64,
        anchor: String,
    },
    #[error("no latency samples")]
    EmptySamples,
    #[error("cannot access {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed summary {path}: {reason}")]
    Summary { path: PathBuf, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidatorConfig {
    pub sos: SosParams,
    pub window_ms: i64,
    pub count_window: usize,
    pub clock_mode: ClockMode,
    /// Mismatches kept per query in the report.
    pub max_mismatches: usize,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self {
            sos: SosParams::default(),
            window_ms: 1_000,
            count_window: 500,
            clock_mode: ClockMode::Logical,
            max_mismatches: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub position: usize,
    pub expected: Option<String>,
    pub actual: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryValidation {
    pub query: u8,
    pub expected: usize,
    pub actual: usize,
    pub matched: usize,
    pub mismatches: Vec<Mismatch>,
    pub verdict: Verdict,
}

/// Expected result of one query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expected {
    Lines(Vec<String>),
    Rows(Vec<ExpectedRow>),
}

pub fn recompute_expected(
    query: QueryId,
    catalog: &TopicCatalog,
    names: &TopicNames,
    pre: &BusinessDb,
    cfg: &ValidatorConfig,
) -> Result<Expected, ValidatorError> {
    Ok(match query.get() {
        1 => Expected::Lines(oracle::q1(catalog, names, cfg)?),
        2 => Expected::Lines(oracle::q2(catalog, names, cfg)?),
        3 => Expected::Lines(oracle::q3(catalog, names)?),
        4 => Expected::Lines(oracle::q4(catalog, names, pre)?),
        _ => Expected::Rows(oracle::q5(catalog, names, pre)?),
    })
}

/// Result payloads of a query that writes to a topic.
pub fn actual_lines(query: QueryId, catalog: &TopicCatalog, names: &TopicNames) -> Result<Vec<String>, ValidatorError> {
    let topic = names.output(query.get());
    let log = catalog
        .topic(&topic)
        .map_err(|_| ValidatorError::MissingTopic(topic))?;
    Ok(log
        .snapshot()
        .iter()
        .map(|e| e.text().unwrap_or_default().to_string())
        .collect())
}

fn same_output(query: QueryId, expected: &str, actual: &str) -> bool {
    if query.get() != 2 {
        return expected == actual;
    }
    let (Some((e_rec, e_phi)), Some((a_rec, a_phi))) = (expected.rsplit_once(','), actual.rsplit_once(','))
    else {
        return false;
    };
    match (e_phi.parse::<f64>(), a_phi.parse::<f64>()) {
        (Ok(e), Ok(a)) => e_rec == a_rec && round2(e) == round2(a),
        _ => false,
    }
}

fn verdict(expected: usize, actual: usize, matched: usize) -> Verdict {
    if matched == expected && matched == actual {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

/// Order-sensitive element-wise comparison of result lines.
pub fn compare(expected: &[String], actual: &[String], query: QueryId, max_mismatches: usize) -> QueryValidation {
    let mut matched = 0;
    let mut mismatches = Vec::new();
    for position in 0..expected.len().max(actual.len()) {
        let (e, a) = (expected.get(position), actual.get(position));
        if let (Some(e), Some(a)) = (e, a) {
            if same_output(query, e, a) {
                matched += 1;
                continue;
            }
        }
        if mismatches.len() < max_mismatches {
            mismatches.push(Mismatch {
                position,
                expected: e.cloned(),
                actual: a.cloned(),
            });
        }
    }
    QueryValidation {
        query: query.get(),
        expected: expected.len(),
        actual: actual.len(),
        matched,
        verdict: verdict(expected.len(), actual.len(), matched),
        mismatches,
    }
}

fn field_ok(field: Field, actual: Option<i64>, update_ts: Option<i64>, mode: ClockMode) -> bool {
    match (field, mode) {
        (Field::Kept(v), _) => actual == v,
        (Field::Written(ts), ClockMode::Logical) => actual == Some(ts),
        (Field::Written(ts), ClockMode::Real) => {
            actual.is_some_and(|v| v >= ts && update_ts.is_some_and(|u| v <= u))
        }
    }
}

fn render_row(key: OrderLineKey, start: Option<i64>, end: Option<i64>) -> String {
    let opt = |v: Option<i64>| v.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{},{},{}", key.o_id, key.ol_number, key.pol_number, opt(start), opt(end))
}

fn render_expected(row: &ExpectedRow) -> String {
    let f = |f: Field| match f {
        Field::Kept(v) => v.map(|v| v.to_string()).unwrap_or_default(),
        Field::Written(ts) => format!(">={ts}"),
    };
    format!("{},{},{},{},{}", row.key.o_id, row.key.ol_number, row.key.pol_number, f(row.start), f(row.end))
}

/// Compares production order lines after the run with their expected state.
pub fn compare_rows(expected: &[ExpectedRow], post: &BusinessDb, mode: ClockMode, max_mismatches: usize) -> QueryValidation {
    let actual: BTreeMap<OrderLineKey, _> = post
        .production_order_lines()
        .into_iter()
        .map(|r| (r.key, r))
        .collect();
    let wanted: BTreeSet<OrderLineKey> = expected.iter().map(|r| r.key).collect();
    let mut matched = 0;
    let mut mismatches = Vec::new();
    let mut note = |position, expected: Option<String>, actual: Option<String>| {
        if mismatches.len() < max_mismatches {
            mismatches.push(Mismatch {
                position,
                expected,
                actual,
            });
        }
    };
    for (position, row) in expected.iter().enumerate() {
        match actual.get(&row.key) {
            Some(a)
                if field_ok(row.start, a.start_ts, a.update_ts, mode)
                    && field_ok(row.end, a.end_ts, a.update_ts, mode) =>
            {
                matched += 1
            }
            Some(a) => note(position, Some(render_expected(row)), Some(render_row(a.key, a.start_ts, a.end_ts))),
            None => note(position, Some(render_expected(row)), None),
        }
    }
    for (position, a) in actual.values().enumerate() {
        if !wanted.contains(&a.key) {
            note(expected.len() + position, None, Some(render_row(a.key, a.start_ts, a.end_ts)));
        }
    }
    QueryValidation {
        query: 5,
        expected: expected.len(),
        actual: actual.len(),
        matched,
        verdict: verdict(expected.len(), actual.len(), matched),
        mismatches,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub query: u8,
    pub anchor_offset: u64,
    pub input_ts_ms: i64,
    pub result_ts_ms: i64,
    pub latency_ms: i64,
}

fn dangling(query: QueryId, position: usize, anchor: impl Into<String>) -> ValidatorError {
    ValidatorError::DanglingAnchor {
        query,
        position: position as u64,
        anchor: anchor.into(),
    }
}

/// One sample per result: result topic entries for Q1 to Q4, updated rows for Q5.
pub fn compute_latencies(
    query: QueryId,
    catalog: &TopicCatalog,
    names: &TopicNames,
    post: &BusinessDb,
) -> Result<Vec<LatencySample>, ValidatorError> {
    let topic = |name: String| catalog.topic(&name).map_err(|_| ValidatorError::MissingTopic(name));
    let sample = |anchor_offset, input_ts_ms, result_ts_ms: i64| LatencySample {
        query: query.get(),
        anchor_offset,
        input_ts_ms,
        result_ts_ms,
        latency_ms: result_ts_ms - input_ts_ms,
    };
    if query.get() == 5 {
        let mut last: HashMap<OrderLineKey, (u64, i64)> = HashMap::new();
        for e in topic(names.times())?.snapshot() {
            if let Some(rec) = e.text().and_then(|t| parse_production_time(t).ok()) {
                last.insert(rec.key(), (e.offset, e.ingestion_ts));
            }
        }
        return post
            .scan_updates(Table::ProductionOrderLine, i64::MIN)
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let key = OrderLineKey {
                    o_id: row.key[0] as u32,
                    ol_number: row.key[1] as u32,
                    pol_number: row.key[2] as u32,
                };
                let (offset, ts) = last.get(&key).ok_or_else(|| dangling(query, i, key.to_string()))?;
                Ok(sample(*offset, *ts, row.update_ts))
            })
            .collect();
    }
    let out = topic(names.output(query.get()))?.snapshot();
    let anchors = topic(names.anchors(query.get()))?.snapshot();
    let mut inputs = HashMap::new();
    out.iter()
        .enumerate()
        .map(|(i, result)| {
            let text = anchors.get(i).and_then(|a| a.text()).unwrap_or_default();
            let anchor = InputRef::decode(text).ok_or_else(|| dangling(query, i, text))?;
            if !inputs.contains_key(&anchor.topic) {
                let log = catalog.topic(&anchor.topic).map_err(|_| dangling(query, i, text))?;
                inputs.insert(anchor.topic.clone(), log);
            }
            let input = inputs[&anchor.topic]
                .get(anchor.offset)
                .ok_or_else(|| dangling(query, i, text))?;
            Ok(sample(anchor.offset, input.ingestion_ts, result.ingestion_ts))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub min_ms: i64,
    pub max_ms: i64,
    pub mean_ms: f64,
    /// Nearest-rank 90th percentile.
    pub p90_ms: i64,
}

impl LatencyStats {
    /// `(p90, min, max, mean)` in seconds with three decimals.
    pub fn seconds(&self) -> [String; 4] {
        let s = |ms: f64| format!("{:.3}", ms / 1000.0);
        [
            s(self.p90_ms as f64),
            s(self.min_ms as f64),
            s(self.max_ms as f64),
            s(self.mean_ms),
        ]
    }
}

pub fn aggregate(latencies_ms: &[i64]) -> Result<LatencyStats, ValidatorError> {
    if latencies_ms.is_empty() {
        return Err(ValidatorError::EmptySamples);
    }
    let mut sorted = latencies_ms.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let rank = (9 * n).div_ceil(10);
    let sum: i128 = sorted.iter().map(|&v| v as i128).sum();
    Ok(LatencyStats {
        count: n,
        min_ms: sorted[0],
        max_ms: sorted[n - 1],
        mean_ms: sum as f64 / n as f64,
        p90_ms: sorted[rank - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub validation: QueryValidation,
    /// Absent when the query produced no results.
    pub latency: Option<LatencyStats>,
    pub latency_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub queries: Vec<QueryReport>,
    pub verdict: Verdict,
}

pub type Samples = BTreeMap<u8, Vec<LatencySample>>;

/// Validates and measures every query in `queries`.
pub fn validate_run(
    cfg: &ValidatorConfig,
    queries: &BTreeSet<QueryId>,
    catalog: &TopicCatalog,
    names: &TopicNames,
    pre: &BusinessDb,
    post: &BusinessDb,
) -> Result<(ValidationReport, Samples), ValidatorError> {
    let mut reports = Vec::new();
    let mut samples = Samples::new();
    for &query in queries {
        let validation = match recompute_expected(query, catalog, names, pre, cfg)? {
            Expected::Lines(expected) => {
                compare(&expected, &actual_lines(query, catalog, names)?, query, cfg.max_mismatches)
            }
            Expected::Rows(expected) => compare_rows(&expected, post, cfg.clock_mode, cfg.max_mismatches),
        };
        let s = compute_latencies(query, catalog, names, post)?;
        let ms: Vec<i64> = s.iter().map(|x| x.latency_ms).collect();
        reports.push(QueryReport {
            validation,
            latency: aggregate(&ms).ok(),
            latency_csv: format!("latencies-q{}.csv", query.get()),
        });
        samples.insert(query.get(), s);
    }
    let verdict = if reports.iter().all(|r| r.validation.verdict == Verdict::Pass) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok((
        ValidationReport {
            queries: reports,
            verdict,
        },
        samples,
    ))
}

pub fn latency_csv(samples: &[LatencySample]) -> String {
    let mut out = String::from("anchor_offset,input_ts_ms,result_ts_ms,latency_ms\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{},{}", s.anchor_offset, s.input_ts_ms, s.result_ts_ms, s.latency_ms);
    }
    out
}

/// Human-readable summary table.
pub fn render_text(report: &ValidationReport) -> String {
    let mut out = format!(
        "{:<6}{:<9}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
        "query", "verdict", "expected", "actual", "matched", "p90_s", "min_s", "max_s", "mean_s"
    );
    for q in &report.queries {
        let v = &q.validation;
        let stats = q
            .latency
            .map(|l| l.seconds())
            .unwrap_or_else(|| std::array::from_fn(|_| "n/a".to_string()));
        let _ = writeln!(
            out,
            "{:<6}{:<9}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}",
            format!("Q{}", v.query),
            v.verdict.to_string(),
            v.expected,
            v.actual,
            v.matched,
            stats[0],
            stats[1],
            stats[2],
            stats[3]
        );
    }
    let _ = writeln!(out, "overall: {}", report.verdict);
    out
}

/// Writes `latencies-q{n}.csv`, `summary.json` and `summary.txt` into `dir`.
pub fn emit_reports(report: &ValidationReport, samples: &Samples, dir: &Path) -> Result<Vec<PathBuf>, ValidatorError> {
    let write = |path: PathBuf, text: &str| {
        fs::write(&path, text)
            .map(|_| path.clone())
            .map_err(|source| ValidatorError::Storage { path, source })
    };
    fs::create_dir_all(dir).map_err(|source| ValidatorError::Storage {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::new();
    for q in &report.queries {
        let s = samples.get(&q.validation.query).map(Vec::as_slice).unwrap_or_default();
        paths.push(write(dir.join(&q.latency_csv), &latency_csv(s))?);
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    paths.push(write(dir.join("summary.json"), &json)?);
    paths.push(write(dir.join("summary.txt"), &render_text(report))?);
    Ok(paths)
}

pub fn read_summary(path: &Path) -> Result<ValidationReport, ValidatorError> {
    let text = fs::read_to_string(path).map_err(|source| ValidatorError::Storage {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ValidatorError::Summary {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
