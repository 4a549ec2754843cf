//! The five benchmark queries as stateful operators.
//!
//! Operators see one input entry at a time and emit result lines through an
//! [`Emitter`]. They never read the clock directly; the runtime hands them
//! the clock that applies to the entry being processed.

use crate::broker::TopicLog;
use crate::clock::Clock;
use crate::datagen::{MF01_ERROR_LIMIT, MF03_LOW_LIMIT};
use crate::model::{InputRef, ProductionTimeRecord, SensorRecord};
use crate::store::{BusinessDb, SharedDb, StoreError};

use super::sos::{is_degenerate, outlier_probabilities, SosParams};
use super::QueryStats;

/// Arithmetic mean of `sum / count` rounded half-up to three decimals.
fn mean_3dp(sum: u64, count: u64) -> String {
    let scaled = (2 * sum as u128 * 1000 + count as u128) / (2 * count as u128);
    format!("{}.{:03}", scaled / 1000, scaled % 1000)
}

/// `avg,min,max,count` of mf01 over a non-empty window.
pub fn q1_check_sensors(window: &[SensorRecord]) -> Option<String> {
    let first = window.first()?;
    let mut acc = WindowStats::new(first.mf01);
    for r in &window[1..] {
        acc.add(r.mf01);
    }
    Some(acc.render())
}

#[derive(Debug, Clone, Copy)]
struct WindowStats {
    sum: u64,
    min: u32,
    max: u32,
    count: u64,
}

impl WindowStats {
    fn new(v: u32) -> Self {
        Self {
            sum: v as u64,
            min: v,
            max: v,
            count: 1,
        }
    }

    fn add(&mut self, v: u32) {
        self.sum += v as u64;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.count += 1;
    }

    fn render(&self) -> String {
        format!(
            "{},{},{},{}",
            mean_3dp(self.sum, self.count),
            self.min,
            self.max,
            self.count
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("all points of the window coincide")]
pub struct DegenerateWindow;

/// Positions and outlier probabilities of the points of a count window
/// whose probability is at least 0.5.
pub fn q2_outliers(
    window: &[SensorRecord],
    params: &SosParams,
) -> Result<Vec<(usize, f64)>, DegenerateWindow> {
    let points: Vec<[f64; 2]> = window
        .iter()
        .map(|r| [r.mf01 as f64, r.mf02 as f64])
        .collect();
    // two coinciding points are a well-defined window: each binds fully to the other
    if points.len() > 2 && is_degenerate(&points) {
        return Err(DegenerateWindow);
    }
    Ok(outlier_probabilities(&points, params)
        .into_iter()
        .enumerate()
        .filter(|&(_, phi)| phi >= 0.5)
        .collect())
}

/// Probability rounded half-up to two decimals.
pub fn format_probability(phi: f64) -> String {
    format!("{:.2}", (phi * 100.0 + 0.5).floor() / 100.0)
}

pub fn q3_identify_errors(record: &SensorRecord) -> bool {
    record.mf01 > MF01_ERROR_LIMIT
}

/// True when the machine draws low power outside its scheduled downtime.
pub fn q4_check_power(record: &SensorRecord, db: &BusinessDb) -> Result<bool, StoreError> {
    let (start, end) = db.lookup_downtime(record.workplace_id)?;
    Ok(record.mf03 < MF03_LOW_LIMIT && (record.ts > end || record.ts < start))
}

/// Stores the current time as start or end of the referenced production line.
pub fn q5_persist_times(
    record: &ProductionTimeRecord,
    db: &mut BusinessDb,
    clock: &dyn Clock,
) -> Result<i64, StoreError> {
    db.set_production_time(record.key(), record.is_end, clock.now_ms(), clock)
}

/// Appends results and their anchors to a query's output topics.
pub struct Emitter<'a> {
    pub(super) out: Option<&'a TopicLog>,
    pub(super) anchors: Option<&'a TopicLog>,
    pub(super) clock: &'a dyn Clock,
    pub(super) stats: &'a mut QueryStats,
}

impl Emitter<'_> {
    pub fn emit(&mut self, payload: String, anchor: &InputRef) {
        if let (Some(out), Some(anchors)) = (self.out, self.anchors) {
            out.append(payload, self.clock);
            anchors.append(anchor.encode(), self.clock);
        }
        self.stats.outputs += 1;
    }

    pub fn dead_letter(&mut self) {
        self.stats.dead_letters += 1;
    }
}

/// One input entry handed to an operator.
pub struct Input<'a> {
    pub line: &'a str,
    pub anchor: InputRef,
}

pub trait Operator: Send {
    fn on_input(&mut self, input: Input<'_>, out: &mut Emitter<'_>);
    fn finish(&mut self, out: &mut Emitter<'_>);
}

/// Q1: mf01 statistics per epoch-aligned event-time window.
pub struct TumblingStats {
    width_ms: i64,
    current: Option<(i64, WindowStats, InputRef)>,
}

impl TumblingStats {
    pub fn new(width_ms: i64) -> Self {
        Self {
            width_ms,
            current: None,
        }
    }
}

impl Operator for TumblingStats {
    fn on_input(&mut self, input: Input<'_>, out: &mut Emitter<'_>) {
        let Ok(r) = crate::model::parse_sensor(input.line) else {
            out.dead_letter();
            return;
        };
        let window = r.ts.div_euclid(self.width_ms);
        match &mut self.current {
            Some((w, acc, last)) if *w == window => {
                acc.add(r.mf01);
                *last = input.anchor;
            }
            Some((w, _, _)) if window < *w => {
                out.stats.late_records += 1;
            }
            current => {
                if let Some((_, acc, last)) = current.take() {
                    out.emit(acc.render(), &last);
                }
                *current = Some((window, WindowStats::new(r.mf01), input.anchor));
            }
        }
    }

    fn finish(&mut self, out: &mut Emitter<'_>) {
        if let Some((_, acc, last)) = self.current.take() {
            out.emit(acc.render(), &last);
        }
    }
}

/// Q2: outliers of (mf01, mf02) per count window.
pub struct CountWindowOutliers {
    size: usize,
    params: SosParams,
    lines: Vec<String>,
    records: Vec<SensorRecord>,
    last: Option<InputRef>,
}

impl CountWindowOutliers {
    pub fn new(size: usize, params: SosParams) -> Self {
        Self {
            size,
            params,
            lines: Vec::with_capacity(size),
            records: Vec::with_capacity(size),
            last: None,
        }
    }
}

impl Operator for CountWindowOutliers {
    fn on_input(&mut self, input: Input<'_>, out: &mut Emitter<'_>) {
        let Ok(r) = crate::model::parse_sensor(input.line) else {
            out.dead_letter();
            return;
        };
        self.lines.push(input.line.to_string());
        self.records.push(r);
        self.last = Some(input.anchor);
        if self.records.len() < self.size {
            return;
        }
        let anchor = self.last.take().expect("set above");
        match q2_outliers(&self.records, &self.params) {
            Ok(hits) => {
                for (i, phi) in hits {
                    out.emit(format!("{},{}", self.lines[i], format_probability(phi)), &anchor);
                }
            }
            Err(DegenerateWindow) => out.stats.degenerate_windows += 1,
        }
        self.lines.clear();
        self.records.clear();
    }

    fn finish(&mut self, _out: &mut Emitter<'_>) {
        // a trailing partial window never emits
        self.lines.clear();
        self.records.clear();
    }
}

/// Q3: records whose mf01 exceeds the error limit.
pub struct ErrorFilter;

impl Operator for ErrorFilter {
    fn on_input(&mut self, input: Input<'_>, out: &mut Emitter<'_>) {
        match crate::model::parse_sensor(input.line) {
            Ok(r) if q3_identify_errors(&r) => out.emit(input.line.to_string(), &input.anchor),
            Ok(_) => {}
            Err(_) => out.dead_letter(),
        }
    }

    fn finish(&mut self, _out: &mut Emitter<'_>) {}
}

/// Q4: low power outside scheduled downtime, joined against WORKPLACE.
pub struct PowerCheck {
    db: SharedDb,
}

impl PowerCheck {
    pub fn new(db: SharedDb) -> Self {
        Self { db }
    }
}

impl Operator for PowerCheck {
    fn on_input(&mut self, input: Input<'_>, out: &mut Emitter<'_>) {
        let Ok(r) = crate::model::parse_sensor(input.line) else {
            out.dead_letter();
            return;
        };
        let verdict = q4_check_power(&r, &self.db.read());
        match verdict {
            Ok(true) => out.emit(input.line.to_string(), &input.anchor),
            Ok(false) => {}
            Err(_) => out.dead_letter(),
        }
    }

    fn finish(&mut self, _out: &mut Emitter<'_>) {}
}

/// Q5: production times written into PRODUCTION_ORDER_LINE.
pub struct PersistTimes {
    db: SharedDb,
}

impl PersistTimes {
    pub fn new(db: SharedDb) -> Self {
        Self { db }
    }
}

impl Operator for PersistTimes {
    fn on_input(&mut self, input: Input<'_>, out: &mut Emitter<'_>) {
        let Ok(r) = crate::model::parse_production_time(input.line) else {
            out.dead_letter();
            return;
        };
        let result = q5_persist_times(&r, &mut self.db.write(), out.clock);
        match result {
            Ok(_) => out.stats.outputs += 1,
            Err(_) => out.dead_letter(),
        }
    }

    fn finish(&mut self, _out: &mut Emitter<'_>) {}
}
