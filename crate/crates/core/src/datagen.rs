//! Seeded generation of the business tables and the three input streams.
//!
//! Every output draws from its own ChaCha stream derived from the seed, so a
//! file only depends on `(seed, config)` and never on which other files were
//! generated alongside it.
//!
//! Sensor values are piecewise uniform around the two query thresholds:
//! `mf01` exceeds [`MF01_ERROR_LIMIT`] with probability `error_rate_mf01` and
//! `mf03` falls below [`MF03_LOW_LIMIT`] with probability `low_rate_mf03`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{
    serialize_production_time, serialize_sensor, OrderLineKey, ProductionTimeRecord,
    SensorRecord, ADDITIVE_COLUMNS,
};
use crate::store::{BusinessDb, StoreError, Table};

/// Q3 flags records with `mf01` strictly above this value.
pub const MF01_ERROR_LIMIT: u32 = 14_963;
/// Q4 flags records with `mf03` strictly below this value.
pub const MF03_LOW_LIMIT: u32 = 8_105;

const MF01_RANGE: (u32, u32) = (8_000, 18_000);
const MF02_RANGE: (u32, u32) = (8_000, 14_963);
const MF03_MAX: u32 = 12_000;
const MAX_OPEN_LINES: usize = 8;

const STREAM_BUSINESS: u64 = 1;
const STREAM_TIMES: u64 = 2;
const STREAM_SENSOR_BASE: u64 = 16;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub scale_factor: u32,
    pub workplaces_per_sf: u32,
    pub customers_per_sf: u32,
    pub orders_per_sf: u32,
    pub lines_per_order: u32,
    pub production_lines_per_order_line: u32,
    pub items: u32,
    /// Records per machine stream.
    pub sensor_count: u64,
    /// Event-time density of the sensor streams, records per second.
    pub sensor_rate: u32,
    /// Event time of the first sensor record.
    pub start_ts_ms: i64,
    pub error_rate_mf01: f64,
    pub low_rate_mf03: f64,
    /// Share of the sensor time span covered by each workplace's downtime.
    pub downtime_fraction: f64,
    /// Production order lines included in the times stream; `None` means all.
    pub times_lines: Option<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            scale_factor: 3,
            workplaces_per_sf: 10,
            customers_per_sf: 30,
            orders_per_sf: 100,
            lines_per_order: 3,
            production_lines_per_order_line: 2,
            items: 1_000,
            sensor_count: 60_000,
            sensor_rate: 1_000,
            start_ts_ms: 1_600_000_000_000,
            error_rate_mf01: 0.005,
            low_rate_mf03: 0.09,
            downtime_fraction: 0.5,
            times_lines: None,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let probs = [
            ("error_rate_mf01", self.error_rate_mf01),
            ("low_rate_mf03", self.low_rate_mf03),
            ("downtime_fraction", self.downtime_fraction),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(GenError::InvalidConfig(format!("{name}={p} outside [0,1]")));
            }
        }
        let counts = [
            ("scale_factor", self.scale_factor),
            ("workplaces_per_sf", self.workplaces_per_sf),
            ("customers_per_sf", self.customers_per_sf),
            ("orders_per_sf", self.orders_per_sf),
            ("lines_per_order", self.lines_per_order),
            ("production_lines_per_order_line", self.production_lines_per_order_line),
            ("items", self.items),
            ("sensor_rate", self.sensor_rate),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(GenError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.sensor_count == 0 {
            return Err(GenError::InvalidConfig("sensor_count must be at least 1".into()));
        }
        if self.start_ts_ms < 0 {
            return Err(GenError::InvalidConfig("start_ts_ms must be non-negative".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Event time of the `k`-th sensor record.
    pub fn sensor_ts(&self, k: u64) -> i64 {
        self.start_ts_ms + (k as i128 * 1000 / self.sensor_rate as i128) as i64
    }

    /// Milliseconds of event time covered by a sensor stream.
    pub fn sensor_span_ms(&self) -> i64 {
        let rate = self.sensor_rate as i128;
        ((self.sensor_count as i128 * 1000 + rate - 1) / rate) as i64
    }

    pub fn workplace_count(&self) -> u32 {
        self.workplaces_per_sf * self.scale_factor
    }
}

/// Generated business tables as CSV text keyed by table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusinessData {
    pub tables: BTreeMap<Table, String>,
}

impl BusinessData {
    /// Imports the tables into a fresh store in dependency order.
    pub fn to_db(&self) -> Result<BusinessDb, StoreError> {
        let mut db = BusinessDb::new();
        for (table, csv) in &self.tables {
            db.import_csv(*table, csv)?;
        }
        Ok(db)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, GenError> {
        fs::create_dir_all(dir).map_err(|source| GenError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths = Vec::new();
        for (table, csv) in &self.tables {
            let path = dir.join(table.file_name());
            fs::write(&path, csv).map_err(|source| GenError::Io {
                path: path.clone(),
                source,
            })?;
            paths.push(path);
        }
        Ok(paths)
    }
}

pub fn generate_business(cfg: &GenConfig) -> Result<BusinessData, GenError> {
    use std::fmt::Write as _;

    cfg.validate()?;
    let mut rng = cfg.rng(STREAM_BUSINESS);
    let sf = cfg.scale_factor;
    let mut tables = BTreeMap::new();
    let csv = |table: Table| {
        let mut s = table.header();
        s.push('\n');
        (table, s)
    };

    let (t, mut customers) = csv(Table::Customer);
    let customer_count = cfg.customers_per_sf * sf;
    for c in 1..=customer_count {
        let _ = writeln!(customers, "{c},customer-{c}");
    }
    tables.insert(t, customers);

    let (t, mut items) = csv(Table::Item);
    for i in 1..=cfg.items {
        let _ = writeln!(items, "{i},item-{i}");
    }
    tables.insert(t, items);

    let (_, mut orders) = csv(Table::Order);
    let (_, mut lines) = csv(Table::OrderLine);
    let (_, mut production) = csv(Table::ProductionOrder);
    let mut production_keys = Vec::new();
    for o in 1..=cfg.orders_per_sf * sf {
        let customer = rng.random_range(1..=customer_count);
        let entry = cfg.start_ts_ms - rng.random_range(0..86_400_000i64);
        let _ = writeln!(orders, "{o},{customer},{entry}");
        for ol in 1..=cfg.lines_per_order {
            let item = rng.random_range(1..=cfg.items);
            let qty = rng.random_range(1..=10u32);
            let _ = writeln!(lines, "{o},{ol},{item},{qty}");
            let _ = writeln!(production, "{o},{ol},{qty}");
            production_keys.push((o, ol));
        }
    }
    tables.insert(Table::Order, orders);
    tables.insert(Table::OrderLine, lines);
    tables.insert(Table::ProductionOrder, production);

    let (t, mut workplaces) = csv(Table::Workplace);
    let span = cfg.sensor_span_ms();
    let covered = ((span as f64) * cfg.downtime_fraction).round() as i64;
    for wp in 1..=cfg.workplace_count() {
        let (start, end) = if covered >= 1 {
            let offset = rng.random_range(0..=(span - covered).max(0));
            (cfg.start_ts_ms + offset, cfg.start_ts_ms + offset + covered)
        } else {
            // no record may fall inside: schedule the downtime before the first record
            (cfg.start_ts_ms - 2_000, cfg.start_ts_ms - 1_000)
        };
        let _ = writeln!(workplaces, "{wp},workplace-{wp},{start},{end}");
    }
    tables.insert(t, workplaces);

    let (t, mut pols) = csv(Table::ProductionOrderLine);
    for (o, ol) in production_keys {
        for pol in 1..=cfg.production_lines_per_order_line {
            let wp = rng.random_range(1..=cfg.workplace_count());
            let _ = writeln!(pols, "{o},{ol},{pol},{wp},,");
        }
    }
    tables.insert(t, pols);

    Ok(BusinessData { tables })
}

/// Begin/end events for production order lines of `db`.
///
/// Each selected line contributes one begin followed later by one end. Up to
/// eight lines are open at once, so events of different orders interleave.
pub fn generate_production_times(cfg: &GenConfig, db: &BusinessDb) -> Vec<ProductionTimeRecord> {
    let mut rng = cfg.rng(STREAM_TIMES);
    let mut keys: Vec<OrderLineKey> = db.production_order_lines().into_iter().map(|r| r.key).collect();
    keys.shuffle(&mut rng);
    if let Some(n) = cfg.times_lines {
        keys.truncate(n);
    }
    let event = |key: OrderLineKey, is_end| ProductionTimeRecord {
        o_id: key.o_id,
        ol_number: key.ol_number,
        pol_number: key.pol_number,
        is_end,
    };
    let mut out = Vec::with_capacity(keys.len() * 2);
    let mut pending = keys.into_iter();
    let mut open: Vec<OrderLineKey> = Vec::new();
    let mut next = pending.next();
    while next.is_some() || !open.is_empty() {
        let begin = match next {
            Some(_) if open.is_empty() => true,
            Some(_) if open.len() < MAX_OPEN_LINES => rng.random_bool(0.5),
            _ => false,
        };
        if begin {
            let key = next.take().expect("checked above");
            out.push(event(key, false));
            open.push(key);
            next = pending.next();
        } else {
            let key = open.swap_remove(rng.random_range(0..open.len()));
            out.push(event(key, true));
        }
    }
    out
}

/// Lazily generated sensor stream of one machine.
pub struct SensorStream<'a> {
    cfg: &'a GenConfig,
    rng: ChaCha8Rng,
    workplaces: &'a [u32],
    next: u64,
}

impl Iterator for SensorStream<'_> {
    type Item = SensorRecord;

    fn next(&mut self) -> Option<SensorRecord> {
        if self.next >= self.cfg.sensor_count {
            return None;
        }
        let k = self.next;
        self.next += 1;
        let rng = &mut self.rng;
        let workplace_id = self.workplaces[rng.random_range(0..self.workplaces.len())];
        let mut r = SensorRecord::blank(self.cfg.sensor_ts(k), k, workplace_id);
        r.mf01 = if rng.random_bool(self.cfg.error_rate_mf01) {
            rng.random_range(MF01_ERROR_LIMIT + 1..=MF01_RANGE.1)
        } else {
            rng.random_range(MF01_RANGE.0..=MF01_ERROR_LIMIT)
        };
        r.mf02 = rng.random_range(MF02_RANGE.0..=MF02_RANGE.1);
        r.mf03 = if rng.random_bool(self.cfg.low_rate_mf03) {
            rng.random_range(0..MF03_LOW_LIMIT)
        } else {
            rng.random_range(MF03_LOW_LIMIT..=MF03_MAX)
        };
        for v in [&mut r.pc13, &mut r.pc14, &mut r.pc15, &mut r.pc25, &mut r.pc26, &mut r.pc27] {
            *v = rng.random_range(0..=100);
        }
        let mut additives = [false; ADDITIVE_COLUMNS];
        additives.iter_mut().for_each(|b| *b = rng.random_bool(0.5));
        r.additives = additives;
        Some(r)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.cfg.sensor_count - self.next) as usize;
        (left, Some(left))
    }
}

/// Sensor stream of machine `machine` (1 or 2) over the given workplaces.
pub fn sensor_stream<'a>(
    cfg: &'a GenConfig,
    machine: u8,
    workplaces: &'a [u32],
) -> Result<SensorStream<'a>, GenError> {
    cfg.validate()?;
    if workplaces.is_empty() {
        return Err(GenError::InvalidConfig("no workplaces to assign".into()));
    }
    Ok(SensorStream {
        cfg,
        rng: cfg.rng(STREAM_SENSOR_BASE + machine as u64),
        workplaces,
        next: 0,
    })
}

pub fn generate_sensor(
    cfg: &GenConfig,
    machine: u8,
    workplaces: &[u32],
) -> Result<Vec<SensorRecord>, GenError> {
    Ok(sensor_stream(cfg, machine, workplaces)?.collect())
}

/// Paths of the files written by [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub business: Vec<PathBuf>,
    pub sensor1: PathBuf,
    pub sensor2: PathBuf,
    pub times: PathBuf,
}

fn write_lines<I>(path: &Path, lines: I) -> Result<(), GenError>
where
    I: IntoIterator<Item = String>,
{
    let io_err = |source| GenError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for line in lines {
        out.write_all(line.as_bytes()).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Writes `business/<TABLE>.csv` and `streams/{sensor1,sensor2,times}.csv` under `dir`.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path) -> Result<DatasetFiles, GenError> {
    let business = generate_business(cfg)?;
    let business_paths = business.write(&dir.join("business"))?;
    let db = business.to_db()?;
    let streams = dir.join("streams");
    fs::create_dir_all(&streams).map_err(|source| GenError::Io {
        path: streams.clone(),
        source,
    })?;
    let workplaces = db.workplace_ids();
    let sensor1 = streams.join("sensor1.csv");
    let sensor2 = streams.join("sensor2.csv");
    let times = streams.join("times.csv");
    write_lines(
        &sensor1,
        sensor_stream(cfg, 1, &workplaces)?.map(|r| serialize_sensor(&r)),
    )?;
    write_lines(
        &sensor2,
        sensor_stream(cfg, 2, &workplaces)?.map(|r| serialize_sensor(&r)),
    )?;
    write_lines(
        &times,
        generate_production_times(cfg, &db)
            .iter()
            .map(serialize_production_time),
    )?;
    Ok(DatasetFiles {
        business: business_paths,
        sensor1,
        sensor2,
        times,
    })
}
