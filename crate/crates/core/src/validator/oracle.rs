//! Expected query results recomputed from the persisted input logs.

use std::collections::BTreeMap;

use crate::broker::{Entry, TopicCatalog, TopicNames};
use crate::model::{parse_production_time, parse_sensor, OrderLineKey, SensorRecord};
use crate::store::BusinessDb;

use super::{dense, ValidatorConfig, ValidatorError};

fn entries(catalog: &TopicCatalog, topic: &str) -> Result<Vec<Entry>, ValidatorError> {
    catalog
        .topic(topic)
        .map(|log| log.snapshot())
        .map_err(|_| ValidatorError::MissingTopic(topic.to_string()))
}

fn sensors(catalog: &TopicCatalog, topic: &str) -> Result<Vec<(Entry, SensorRecord)>, ValidatorError> {
    Ok(entries(catalog, topic)?
        .into_iter()
        .filter_map(|e| {
            let r = parse_sensor(e.text()?).ok()?;
            Some((e, r))
        })
        .collect())
}

fn line(e: &Entry) -> String {
    e.text().unwrap_or_default().to_string()
}

/// Q1: one line per non-empty event-time window, records behind the newest window ignored.
pub fn q1(catalog: &TopicCatalog, names: &TopicNames, cfg: &ValidatorConfig) -> Result<Vec<String>, ValidatorError> {
    let mut buckets: BTreeMap<i64, Vec<u32>> = BTreeMap::new();
    let mut newest = i64::MIN;
    for (_, r) in sensors(catalog, &names.sensor1())? {
        let w = r.ts.div_euclid(cfg.window_ms);
        if w < newest {
            continue;
        }
        newest = w;
        buckets.entry(w).or_default().push(r.mf01);
    }
    Ok(buckets
        .values()
        .map(|vals| {
            let n = vals.len() as u128;
            let sum: u128 = vals.iter().map(|&v| v as u128).sum();
            let (q, r) = (sum * 1000 / n, sum * 1000 % n);
            let milli = if 2 * r >= n { q + 1 } else { q };
            format!(
                "{}.{:03},{},{},{}",
                milli / 1000,
                milli % 1000,
                vals.iter().min().expect("non-empty"),
                vals.iter().max().expect("non-empty"),
                n
            )
        })
        .collect())
}

/// Half-up to two decimals, as text.
pub fn round2(phi: f64) -> String {
    let cents = (phi * 100.0 + 0.5).floor() as i64;
    format!("{}.{:02}", cents / 100, cents % 100)
}

/// Q2: per full count window, the records with outlier probability at least 0.5.
pub fn q2(catalog: &TopicCatalog, names: &TopicNames, cfg: &ValidatorConfig) -> Result<Vec<String>, ValidatorError> {
    let records = sensors(catalog, &names.sensor1())?;
    let mut out = Vec::new();
    for window in records.chunks_exact(cfg.count_window) {
        let points: Vec<(f64, f64)> = window.iter().map(|(_, r)| (r.mf01 as f64, r.mf02 as f64)).collect();
        if points.len() > 2 && points.iter().all(|p| *p == points[0]) {
            continue;
        }
        let phi = dense::outlier_probabilities(&points, cfg.sos.perplexity);
        for ((e, _), p) in window.iter().zip(phi) {
            if p >= 0.5 {
                out.push(format!("{},{}", line(e), round2(p)));
            }
        }
    }
    Ok(out)
}

/// Q3: records above the error limit.
pub fn q3(catalog: &TopicCatalog, names: &TopicNames) -> Result<Vec<String>, ValidatorError> {
    Ok(sensors(catalog, &names.sensor1())?
        .iter()
        .filter(|(_, r)| r.mf01 > 14_963)
        .map(|(e, _)| line(e))
        .collect())
}

/// Q4: both machines in ingestion order, low power outside downtime.
pub fn q4(catalog: &TopicCatalog, names: &TopicNames, pre: &BusinessDb) -> Result<Vec<String>, ValidatorError> {
    let mut all = Vec::new();
    for (idx, topic) in [names.sensor1(), names.sensor2()].iter().enumerate() {
        for (e, r) in sensors(catalog, topic)? {
            all.push(((e.ingestion_ts, idx, e.offset), e, r));
        }
    }
    all.sort_by_key(|(k, _, _)| *k);
    Ok(all
        .into_iter()
        .filter(|(_, _, r)| {
            pre.workplace(r.workplace_id).is_some_and(|wp| {
                r.mf03 < 8_105 && !(wp.downtime_start..=wp.downtime_end).contains(&r.ts)
            })
        })
        .map(|(_, e, _)| line(&e))
        .collect())
}

/// Expected value of a production time column after the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    /// Never written by the stream; must equal the imported value.
    Kept(Option<i64>),
    /// Last written by the times-log entry ingested at this time.
    Written(i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedRow {
    pub key: OrderLineKey,
    pub start: Field,
    pub end: Field,
}

/// Q5: state of every production order line after replaying the times log.
pub fn q5(catalog: &TopicCatalog, names: &TopicNames, pre: &BusinessDb) -> Result<Vec<ExpectedRow>, ValidatorError> {
    let mut rows: BTreeMap<OrderLineKey, ExpectedRow> = pre
        .production_order_lines()
        .into_iter()
        .map(|r| {
            (
                r.key,
                ExpectedRow {
                    key: r.key,
                    start: Field::Kept(r.start_ts),
                    end: Field::Kept(r.end_ts),
                },
            )
        })
        .collect();
    for e in entries(catalog, &names.times())? {
        let Some(rec) = e.text().and_then(|t| parse_production_time(t).ok()) else {
            continue;
        };
        if let Some(row) = rows.get_mut(&rec.key()) {
            let slot = if rec.is_end { &mut row.end } else { &mut row.start };
            *slot = Field::Written(e.ingestion_ts);
        }
    }
    Ok(rows.into_values().collect())
}
