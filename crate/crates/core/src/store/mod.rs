//! Embedded relational store for the business data.
//!
//! Tables are keyed row collections with a fixed column schema (see
//! [`Table`]). Imports are atomic per call: a batch is parsed and checked for
//! key uniqueness and referential integrity before any row is inserted.
//! Mutations stamp the touched row with an update time from the caller's
//! clock; that time strictly increases per row.

mod schema;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use crate::clock::Clock;
use crate::model::OrderLineKey;

pub use schema::{Column, ColumnType, ForeignKey, Table};

const UPDATES_FILE: &str = "_updates.csv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{table} line {line}: {reason}")]
    Schema {
        table: Table,
        line: usize,
        reason: String,
    },
    #[error("{table}: duplicate key {key:?}")]
    DuplicateKey { table: Table, key: Vec<i64> },
    #[error("{table} row {key:?} references missing {target} {reference:?}")]
    Referential {
        table: Table,
        key: Vec<i64>,
        target: Table,
        reference: Vec<i64>,
    },
    #[error("unknown workplace {0}")]
    UnknownWorkplace(u32),
    #[error("unknown production order line {0}")]
    UnknownKey(OrderLineKey),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("storage error for {what} at {path}: {source}")]
    Storage {
        what: String,
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Value {
    Null,
    Int(i64),
    Text(String),
}

impl Value {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    fn write_csv(&self, out: &mut String) {
        match self {
            Value::Null => {}
            Value::Int(v) => {
                let _ = write!(out, "{v}");
            }
            Value::Text(s) => out.push_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRow {
    pub values: Vec<Value>,
    pub update_ts: Option<i64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct TableData {
    rows: BTreeMap<Vec<i64>, StoredRow>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkplaceRow {
    pub wp_id: u32,
    pub name: String,
    pub downtime_start: i64,
    pub downtime_end: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductionOrderLineRow {
    pub key: OrderLineKey,
    pub workplace_id: u32,
    pub start_ts: Option<i64>,
    pub end_ts: Option<i64>,
    pub update_ts: Option<i64>,
}

/// A row returned by [`BusinessDb::scan_updates`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdatedRow {
    pub key: Vec<i64>,
    pub values: Vec<Value>,
    pub update_ts: i64,
}

pub type SharedDb = Arc<RwLock<BusinessDb>>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusinessDb {
    tables: BTreeMap<Table, TableData>,
}

impl Default for BusinessDb {
    fn default() -> Self {
        Self::new()
    }
}

fn order_line_key(key: OrderLineKey) -> Vec<i64> {
    vec![key.o_id as i64, key.ol_number as i64, key.pol_number as i64]
}

fn parse_line(table: Table, line_no: usize, line: &str) -> Result<Vec<Value>, StoreError> {
    let columns = table.columns();
    let fields: Vec<&str> = line.split(',').collect();
    let schema_err = |reason: String| StoreError::Schema {
        table,
        line: line_no,
        reason,
    };
    if fields.len() != columns.len() {
        return Err(schema_err(format!(
            "expected {} fields, found {}",
            columns.len(),
            fields.len()
        )));
    }
    columns
        .iter()
        .zip(fields)
        .map(|(col, field)| match col.ty {
            ColumnType::Text => Ok(Value::Text(field.to_string())),
            ColumnType::OptInt if field.is_empty() => Ok(Value::Null),
            ColumnType::Int | ColumnType::OptInt => field
                .parse()
                .map(Value::Int)
                .map_err(|_| schema_err(format!("column {}: not an integer: {field:?}", col.name))),
        })
        .collect()
}

/// Per-table row constraints beyond column types.
fn check_row(table: Table, line_no: usize, values: &[Value]) -> Result<(), StoreError> {
    let fail = |reason: &str| {
        Err(StoreError::Schema {
            table,
            line: line_no,
            reason: reason.to_string(),
        })
    };
    if values[..table.key_len()]
        .iter()
        .any(|v| v.as_int().is_some_and(|k| k <= 0))
    {
        return fail("key columns must be positive");
    }
    match table {
        Table::Workplace => {
            if values[2] >= values[3] {
                return fail("wp_downtime_start must precede wp_downtime_end");
            }
        }
        Table::ProductionOrderLine => {
            if let (Value::Int(s), Value::Int(e)) = (&values[4], &values[5]) {
                if s > e {
                    return fail("pol_start_ts after pol_end_ts");
                }
            }
        }
        _ => {}
    }
    Ok(())
}

fn key_of(table: Table, values: &[Value]) -> Vec<i64> {
    values[..table.key_len()]
        .iter()
        .map(|v| v.as_int().unwrap_or_default())
        .collect()
}

impl BusinessDb {
    pub fn new() -> Self {
        Self {
            tables: Table::ALL
                .into_iter()
                .map(|t| (t, TableData::default()))
                .collect(),
        }
    }

    pub fn into_shared(self) -> SharedDb {
        Arc::new(RwLock::new(self))
    }

    fn data(&self, table: Table) -> &TableData {
        &self.tables[&table]
    }

    pub fn row_count(&self, table: Table) -> usize {
        self.data(table).rows.len()
    }

    pub fn contains_key(&self, table: Table, key: &[i64]) -> bool {
        self.data(table).rows.contains_key(key)
    }

    pub fn rows(&self, table: Table) -> impl Iterator<Item = (&Vec<i64>, &StoredRow)> {
        self.data(table).rows.iter()
    }

    /// Imports CSV text (header line first) into `table`, all or nothing.
    pub fn import_csv(&mut self, table: Table, csv: &str) -> Result<usize, StoreError> {
        let mut lines = csv.lines().enumerate();
        let header = lines.next().map(|(_, l)| l).unwrap_or_default();
        if header != table.header() {
            return Err(StoreError::Schema {
                table,
                line: 1,
                reason: format!("header {header:?} does not match {:?}", table.header()),
            });
        }
        let mut batch: BTreeMap<Vec<i64>, Vec<Value>> = BTreeMap::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let values = parse_line(table, i + 1, line)?;
            check_row(table, i + 1, &values)?;
            let key = key_of(table, &values);
            if self.contains_key(table, &key) || batch.contains_key(&key) {
                return Err(StoreError::DuplicateKey { table, key });
            }
            batch.insert(key, values);
        }
        for (key, values) in &batch {
            for fk in table.foreign_keys() {
                let reference: Vec<i64> = fk
                    .columns
                    .iter()
                    .map(|&c| values[c].as_int().unwrap_or_default())
                    .collect();
                // Tables never reference themselves, so the batch cannot satisfy a reference.
                if !self.contains_key(fk.target, &reference) {
                    return Err(StoreError::Referential {
                        table,
                        key: key.clone(),
                        target: fk.target,
                        reference,
                    });
                }
            }
        }
        let count = batch.len();
        let rows = &mut self.tables.get_mut(&table).expect("all tables exist").rows;
        rows.extend(batch.into_iter().map(|(k, values)| {
            (
                k,
                StoredRow {
                    values,
                    update_ts: None,
                },
            )
        }));
        Ok(count)
    }

    /// The table as CSV with a header row, rows in key order.
    pub fn export_csv(&self, table: Table) -> String {
        let mut out = table.header();
        out.push('\n');
        for row in self.data(table).rows.values() {
            for (i, v) in row.values.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                v.write_csv(&mut out);
            }
            out.push('\n');
        }
        out
    }

    pub fn workplace(&self, wp_id: u32) -> Option<WorkplaceRow> {
        let row = self.data(Table::Workplace).rows.get(&vec![wp_id as i64])?;
        Some(WorkplaceRow {
            wp_id,
            name: match &row.values[1] {
                Value::Text(s) => s.clone(),
                _ => String::new(),
            },
            downtime_start: row.values[2].as_int()?,
            downtime_end: row.values[3].as_int()?,
        })
    }

    pub fn workplace_ids(&self) -> Vec<u32> {
        self.data(Table::Workplace)
            .rows
            .keys()
            .map(|k| k[0] as u32)
            .collect()
    }

    /// Next scheduled downtime `(start, end)` of a workplace.
    pub fn lookup_downtime(&self, wp_id: u32) -> Result<(i64, i64), StoreError> {
        self.workplace(wp_id)
            .map(|w| (w.downtime_start, w.downtime_end))
            .ok_or(StoreError::UnknownWorkplace(wp_id))
    }

    fn pol_row(key: &[i64], row: &StoredRow) -> ProductionOrderLineRow {
        ProductionOrderLineRow {
            key: OrderLineKey {
                o_id: key[0] as u32,
                ol_number: key[1] as u32,
                pol_number: key[2] as u32,
            },
            workplace_id: row.values[3].as_int().unwrap_or_default() as u32,
            start_ts: row.values[4].as_int(),
            end_ts: row.values[5].as_int(),
            update_ts: row.update_ts,
        }
    }

    pub fn production_order_line(&self, key: OrderLineKey) -> Option<ProductionOrderLineRow> {
        let k = order_line_key(key);
        self.data(Table::ProductionOrderLine)
            .rows
            .get(&k)
            .map(|row| Self::pol_row(&k, row))
    }

    /// All production order lines in key order.
    pub fn production_order_lines(&self) -> Vec<ProductionOrderLineRow> {
        self.data(Table::ProductionOrderLine)
            .rows
            .iter()
            .map(|(k, row)| Self::pol_row(k, row))
            .collect()
    }

    /// Records a production line entering (`is_end == false`) or leaving its
    /// workplace at `ts`. Returns the row's new update time.
    pub fn set_production_time(
        &mut self,
        key: OrderLineKey,
        is_end: bool,
        ts: i64,
        clock: &dyn Clock,
    ) -> Result<i64, StoreError> {
        let row = self
            .tables
            .get_mut(&Table::ProductionOrderLine)
            .expect("all tables exist")
            .rows
            .get_mut(&order_line_key(key))
            .ok_or(StoreError::UnknownKey(key))?;
        let column = if is_end { 5 } else { 4 };
        row.values[column] = Value::Int(ts);
        let now = clock.now_ms();
        let update_ts = row.update_ts.map_or(now, |prev| now.max(prev + 1));
        row.update_ts = Some(update_ts);
        Ok(update_ts)
    }

    /// Rows of `table` updated at or after `since_ts`, in update order.
    pub fn scan_updates(&self, table: Table, since_ts: i64) -> Vec<UpdatedRow> {
        let mut rows: Vec<UpdatedRow> = self
            .data(table)
            .rows
            .iter()
            .filter_map(|(k, row)| {
                let ts = row.update_ts.filter(|&ts| ts >= since_ts)?;
                Some(UpdatedRow {
                    key: k.clone(),
                    values: row.values.clone(),
                    update_ts: ts,
                })
            })
            .collect();
        rows.sort_by(|a, b| a.update_ts.cmp(&b.update_ts).then_with(|| a.key.cmp(&b.key)));
        rows
    }

    /// Same as [`scan_updates`](Self::scan_updates), looking the table up by name.
    pub fn scan_updates_named(&self, table: &str, since_ts: i64) -> Result<Vec<UpdatedRow>, StoreError> {
        let table: Table = table
            .parse()
            .map_err(StoreError::UnknownTable)?;
        Ok(self.scan_updates(table, since_ts))
    }

    /// Full scan of every foreign key.
    pub fn check_integrity(&self) -> Result<(), StoreError> {
        for table in Table::ALL {
            for (key, row) in &self.data(table).rows {
                for fk in table.foreign_keys() {
                    let reference: Vec<i64> = fk
                        .columns
                        .iter()
                        .map(|&c| row.values[c].as_int().unwrap_or_default())
                        .collect();
                    if !self.contains_key(fk.target, &reference) {
                        return Err(StoreError::Referential {
                            table,
                            key: key.clone(),
                            target: fk.target,
                            reference,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes every table as `<TABLE>.csv` plus the row update times.
    pub fn write_dir(&self, dir: &Path) -> Result<(), StoreError> {
        let io_err = |what: &str, path: &Path| {
            let what = what.to_string();
            let path = path.to_path_buf();
            move |source| StoreError::Storage { what, path, source }
        };
        fs::create_dir_all(dir).map_err(io_err("directory", dir))?;
        for table in Table::ALL {
            let path = dir.join(table.file_name());
            fs::write(&path, self.export_csv(table)).map_err(io_err(table.name(), &path))?;
        }
        let mut updates = String::from("table,key,update_ts\n");
        for table in Table::ALL {
            for (key, row) in &self.data(table).rows {
                if let Some(ts) = row.update_ts {
                    let key: Vec<String> = key.iter().map(i64::to_string).collect();
                    let _ = writeln!(updates, "{},{},{ts}", table.name(), key.join(":"));
                }
            }
        }
        let path = dir.join(UPDATES_FILE);
        fs::write(&path, updates).map_err(io_err("update times", &path))
    }

    /// Loads a directory written by [`write_dir`](Self::write_dir).
    pub fn read_dir(dir: &Path) -> Result<Self, StoreError> {
        let mut db = Self::new();
        for table in Table::ALL {
            let path = dir.join(table.file_name());
            let csv = fs::read_to_string(&path).map_err(|source| StoreError::Storage {
                what: table.name().to_string(),
                path: path.clone(),
                source,
            })?;
            db.import_csv(table, &csv)?;
        }
        let path = dir.join(UPDATES_FILE);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|source| StoreError::Storage {
                what: "update times".into(),
                path: path.clone(),
                source,
            })?;
            for (i, line) in text.lines().enumerate().skip(1) {
                let bad = |reason: &str| StoreError::Schema {
                    table: Table::ProductionOrderLine,
                    line: i + 1,
                    reason: format!("{UPDATES_FILE}: {reason}"),
                };
                let mut parts = line.split(',');
                let (Some(t), Some(k), Some(ts), None) =
                    (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(bad("expected table,key,update_ts"));
                };
                let table: Table = t.parse().map_err(StoreError::UnknownTable)?;
                let key: Vec<i64> = k
                    .split(':')
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad("invalid key"))?;
                let ts: i64 = ts.parse().map_err(|_| bad("invalid update_ts"))?;
                let row = db
                    .tables
                    .get_mut(&table)
                    .and_then(|d| d.rows.get_mut(&key))
                    .ok_or_else(|| bad("update for missing row"))?;
                row.update_ts = Some(ts);
            }
        }
        Ok(db)
    }

    /// Keys present in `table`.
    pub fn keys(&self, table: Table) -> BTreeSet<Vec<i64>> {
        self.data(table).rows.keys().cloned().collect()
    }
}
