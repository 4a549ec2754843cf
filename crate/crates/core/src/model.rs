//! Record types shared by every stage of the benchmark and their CSV form.
//!
//! Sensor records have 67 columns in a fixed order; production-time records
//! have 4. Booleans are written as `0`/`1` and absent optional values as
//! empty fields. Lines carry no trailing newline.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of optional boolean columns (pp01-pp36, pc01-pc06, pc19-pc24).
pub const AUX_COLUMNS: usize = 48;
/// Number of chemical additive flags (bm05-bm10).
pub const ADDITIVE_COLUMNS: usize = 6;
/// Total columns of a serialized sensor record.
pub const SENSOR_COLUMNS: usize = 19 + AUX_COLUMNS;
/// Total columns of a serialized production-time record.
pub const PRODUCTION_TIME_COLUMNS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("column {column}: cannot parse {value:?}")]
    Type { column: String, value: String },
}

/// One machine measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorRecord {
    pub ts: i64,
    pub index: u64,
    pub mf01: u32,
    pub mf02: u32,
    pub mf03: u32,
    pub pc13: u32,
    pub pc14: u32,
    pub pc15: u32,
    pub pc25: u32,
    pub pc26: u32,
    pub pc27: u32,
    pub res: u32,
    pub additives: [bool; ADDITIVE_COLUMNS],
    pub aux: [Option<bool>; AUX_COLUMNS],
    pub workplace_id: u32,
}

impl SensorRecord {
    /// A record with every numeric column zero and every optional column absent.
    pub fn blank(ts: i64, index: u64, workplace_id: u32) -> Self {
        Self {
            ts,
            index,
            mf01: 0,
            mf02: 0,
            mf03: 0,
            pc13: 0,
            pc14: 0,
            pc15: 0,
            pc25: 0,
            pc26: 0,
            pc27: 0,
            res: 0,
            additives: [false; ADDITIVE_COLUMNS],
            aux: [None; AUX_COLUMNS],
            workplace_id,
        }
    }

    /// Column names in serialization order.
    pub fn column_names() -> Vec<String> {
        let mut names: Vec<String> = [
            "ts", "index", "mf01", "mf02", "mf03", "pc13", "pc14", "pc15", "pc25", "pc26",
            "pc27", "res", "bm05", "bm06", "bm07", "bm08", "bm09", "bm10",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        names.extend((1..=36).map(|i| format!("pp{i:02}")));
        names.extend((1..=6).map(|i| format!("pc{i:02}")));
        names.extend((19..=24).map(|i| format!("pc{i:02}")));
        names.push("workplace_id".to_string());
        names
    }
}

fn bit(b: bool) -> char {
    if b {
        '1'
    } else {
        '0'
    }
}

pub fn serialize_sensor(r: &SensorRecord) -> String {
    let mut out = String::with_capacity(160);
    // Writing to a String cannot fail.
    let _ = write!(
        out,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.ts, r.index, r.mf01, r.mf02, r.mf03, r.pc13, r.pc14, r.pc15, r.pc25, r.pc26, r.pc27, r.res
    );
    for b in r.additives {
        out.push(',');
        out.push(bit(b));
    }
    for a in r.aux {
        out.push(',');
        if let Some(b) = a {
            out.push(bit(b));
        }
    }
    let _ = write!(out, ",{}", r.workplace_id);
    out
}

fn column_name(i: usize) -> String {
    SensorRecord::column_names()
        .into_iter()
        .nth(i)
        .unwrap_or_else(|| format!("#{i}"))
}

fn int_field<T: FromStr>(fields: &[&str], i: usize) -> Result<T, ParseError> {
    fields[i].parse().map_err(|_| ParseError::Type {
        column: column_name(i),
        value: fields[i].to_string(),
    })
}

fn bool_field(value: &str, column: impl FnOnce() -> String) -> Result<bool, ParseError> {
    match value {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(ParseError::Type {
            column: column(),
            value: other.to_string(),
        }),
    }
}

pub fn parse_sensor(line: &str) -> Result<SensorRecord, ParseError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != SENSOR_COLUMNS {
        return Err(ParseError::FieldCount {
            expected: SENSOR_COLUMNS,
            found: fields.len(),
        });
    }
    let mut additives = [false; ADDITIVE_COLUMNS];
    for (k, slot) in additives.iter_mut().enumerate() {
        let i = 12 + k;
        *slot = bool_field(fields[i], || column_name(i))?;
    }
    let mut aux = [None; AUX_COLUMNS];
    for (k, slot) in aux.iter_mut().enumerate() {
        let i = 18 + k;
        *slot = match fields[i] {
            "" => None,
            v => Some(bool_field(v, || column_name(i))?),
        };
    }
    Ok(SensorRecord {
        ts: int_field(&fields, 0)?,
        index: int_field(&fields, 1)?,
        mf01: int_field(&fields, 2)?,
        mf02: int_field(&fields, 3)?,
        mf03: int_field(&fields, 4)?,
        pc13: int_field(&fields, 5)?,
        pc14: int_field(&fields, 6)?,
        pc15: int_field(&fields, 7)?,
        pc25: int_field(&fields, 8)?,
        pc26: int_field(&fields, 9)?,
        pc27: int_field(&fields, 10)?,
        res: int_field(&fields, 11)?,
        additives,
        aux,
        workplace_id: int_field(&fields, SENSOR_COLUMNS - 1)?,
    })
}

/// Composite key of a production order line: (order id, order line, production line).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OrderLineKey {
    pub o_id: u32,
    pub ol_number: u32,
    pub pol_number: u32,
}

impl fmt::Display for OrderLineKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.o_id, self.ol_number, self.pol_number)
    }
}

/// A product entering (`is_end == false`) or leaving a workplace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductionTimeRecord {
    pub o_id: u32,
    pub ol_number: u32,
    pub pol_number: u32,
    pub is_end: bool,
}

impl ProductionTimeRecord {
    pub fn key(&self) -> OrderLineKey {
        OrderLineKey {
            o_id: self.o_id,
            ol_number: self.ol_number,
            pol_number: self.pol_number,
        }
    }
}

pub fn serialize_production_time(r: &ProductionTimeRecord) -> String {
    format!("{},{},{},{}", r.o_id, r.ol_number, r.pol_number, bit(r.is_end))
}

pub fn parse_production_time(line: &str) -> Result<ProductionTimeRecord, ParseError> {
    const NAMES: [&str; 4] = ["pt_o_id", "pt_ol_number", "pt_pol_number", "pt_is_end"];
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != PRODUCTION_TIME_COLUMNS {
        return Err(ParseError::FieldCount {
            expected: PRODUCTION_TIME_COLUMNS,
            found: fields.len(),
        });
    }
    let int = |i: usize| -> Result<u32, ParseError> {
        fields[i].parse().map_err(|_| ParseError::Type {
            column: NAMES[i].to_string(),
            value: fields[i].to_string(),
        })
    };
    Ok(ProductionTimeRecord {
        o_id: int(0)?,
        ol_number: int(1)?,
        pol_number: int(2)?,
        is_end: bool_field(fields[3], || NAMES[3].to_string())?,
    })
}

/// One of the five benchmark queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct QueryId(u8);

impl QueryId {
    pub const ALL: [QueryId; 5] = [QueryId(1), QueryId(2), QueryId(3), QueryId(4), QueryId(5)];

    pub fn new(n: u8) -> Option<Self> {
        (1..=5).contains(&n).then_some(QueryId(n))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for QueryId {
    type Error = String;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        QueryId::new(n).ok_or_else(|| format!("query id {n} outside 1..=5"))
    }
}

impl From<QueryId> for u8 {
    fn from(q: QueryId) -> u8 {
        q.0
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

impl FromStr for QueryId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_start_matches(['q', 'Q']);
        let n: u8 = t.parse().map_err(|_| format!("invalid query id {s:?}"))?;
        QueryId::try_from(n)
    }
}

/// Position of an input record in a topic log.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InputRef {
    pub topic: String,
    pub offset: u64,
}

impl InputRef {
    pub fn new(topic: impl Into<String>, offset: u64) -> Self {
        Self {
            topic: topic.into(),
            offset,
        }
    }

    /// `topic,offset`, the payload of an anchor-topic entry.
    pub fn encode(&self) -> String {
        format!("{},{}", self.topic, self.offset)
    }

    pub fn decode(s: &str) -> Option<Self> {
        let (topic, offset) = s.rsplit_once(',')?;
        Some(Self::new(topic, offset.parse().ok()?))
    }
}

/// A query result line together with the input record that anchors its latency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutputRecord {
    pub query_id: QueryId,
    pub payload: String,
    pub anchor_input: InputRef,
    pub result_ts: i64,
}
